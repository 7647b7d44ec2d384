"""Regenerate the bundled scenario files."""

from pathlib import Path

from movelight.builder import dumps, grid_scenario, single_scenario

OUT = Path(__file__).resolve().parents[1] / "src" / "movelight" / "scenarios"

if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "single.json").write_text(dumps(single_scenario()))
    (OUT / "grid4x4.json").write_text(dumps(grid_scenario()))
    print(f"wrote {OUT}/single.json and {OUT}/grid4x4.json")
