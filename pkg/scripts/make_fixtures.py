"""Write the runnable fixture suites (golden, fault-injection and the 99-feature mix).

Usage: python3 scripts/make_fixtures.py [OUTPUT_DIR]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from agentcheck.scenarios import fault_scenarios, fixture_suite, golden_scenarios
from agentcheck.suite import write_suite


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="fixtures")
    args = ap.parse_args()
    root = Path(args.out)
    sets = {
        "golden": list(golden_scenarios().values()),
        "faults": fault_scenarios(),
        "suite99": fixture_suite(99),
    }
    for name, scenarios in sets.items():
        fx = write_suite(root / name, scenarios)
        print(f"{name}: {len(fx.feature_ids)} features -> {fx.config_path}")


if __name__ == "__main__":
    main()
