"""Train MoveLight on one scenario, then compare it against the classical controllers.

    python scripts/train_and_compare.py [single.json] [episodes] [seed]
"""

import sys

from movelight.cli import main

if __name__ == "__main__":
    scenario = sys.argv[1] if len(sys.argv) > 1 else "single.json"
    episodes = sys.argv[2] if len(sys.argv) > 2 else "200"
    seed = sys.argv[3] if len(sys.argv) > 3 else "0"
    out = f"runs/{scenario.split('.')[0]}_seed{seed}"
    code = main(["train", "--scenario", scenario, "--episodes", episodes, "--seed", seed, "--out-dir", out])
    if code == 0:
        code = main(["compare", "--scenario", scenario, "--controller", "fixed,webster,maxpressure,random,movelight",
                     "--checkpoint", f"{out}/checkpoint.npz", "--out-dir", out])
    sys.exit(code)
