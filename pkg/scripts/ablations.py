"""Head-count sweep on the single intersection and neighbor-count sweep on the grid.

Both are expensive at full length (5 cells x 200 episodes); pass e.g.
``--episodes 20`` for a desk-scale pass. MOVELIGHT_THREADS runs cells in
parallel.
"""

import sys

from movelight.cli import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    code = main(["ablate", "--sweep", "heads", "--scenario", "single.json", "--out-dir", "runs/ablate", *extra])
    code |= main(["ablate", "--sweep", "neighbors", "--scenario", "grid4x4.json", "--out-dir", "runs/ablate",
                  *extra])
    sys.exit(code)
