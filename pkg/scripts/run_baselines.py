"""Classical baselines on both bundled scenarios (5 seeds each).

Webster is skipped where its plan is infeasible. Results land in
runs/baselines/<scenario>/compare.{csv,md}.
"""

import sys

from movelight.cli import main

if __name__ == "__main__":
    code = 0
    for scenario in ("single.json", "grid4x4.json"):
        stem = scenario.split(".")[0]
        code |= main(["compare", "--scenario", scenario, "--controller", "fixed,webster,maxpressure,random",
                      "--out-dir", f"runs/baselines/{stem}", *sys.argv[1:]])
    sys.exit(code)
