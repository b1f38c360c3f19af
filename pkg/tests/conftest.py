import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = 10


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    ran = {int(item.split("test_")[-1].split("_")[0])
           for item in getattr(mod, "COLLECTED", set())}
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        elif n in ran or not ran:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  did not complete")


def pytest_collection_modifyitems(items):
    mod = sys.modules.get("test_acceptance")
    if mod is not None:
        mod.COLLECTED = {item.name for item in items if item.module is mod}
