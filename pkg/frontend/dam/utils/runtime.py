# Copyright 2024 Xanadu Quantum Technologies Inc.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
Options shared by the long-running operations: verbosity and the log destination.
"""

import sys
from copy import deepcopy
from dataclasses import dataclass
from io import TextIOWrapper
from typing import Optional


@dataclass
class RunOptions:
    """Generic run options, for which reasonable default values exist.

    Args:
        verbose (Optional[bool]): flag indicating whether to enable verbose output.
            Default is ``False``
        logfile (Optional[TextIOWrapper]): the logfile to write output to.
            Default is ``sys.stderr``
    """

    verbose: Optional[bool] = False
    logfile: Optional[TextIOWrapper] = sys.stderr

    def __deepcopy__(self, memo):
        """Make a deep copy of all fields of a RunOptions object except the logfile, which is
        copied directly"""
        return RunOptions(
            **{
                k: (deepcopy(v) if k != "logfile" else self.logfile)
                for k, v in self.__dict__.items()
            }
        )

    def log(self, tag: str, message: str) -> None:
        """Print a tagged record to the logfile if verbose output is enabled."""
        if self.verbose:
            print(f"[{tag}] {message}", file=self.logfile, flush=True)


def resolve_options(options: Optional[RunOptions]) -> RunOptions:
    """Return ``options`` or the silent defaults."""
    return options if options is not None else RunOptions()
