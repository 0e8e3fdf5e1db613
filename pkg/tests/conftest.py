"""Shared pytest wiring: a per-criterion verdict block for the acceptance tests."""

CRITERIA = {
    "c01": "reference and fast upsampling match brute-force window attention",
    "c02": "stride-1 attention upsampling equals windowed attention convolution",
    "c03": "S=2, K=3 mask admits exactly two inputs at output (1, 2)",
    "c04": "finite-difference gradient suite (every operator + both micro models)",
    "c05": "parameter-count formulas, ~3x layer ratio, attention < deconv totals",
    "c06": "desk-scale 2x super-resolution beats bicubic by >= 0.3 dB",
    "c07": "desk-scale 4x guided depth upsampling beats sparse-bicubic RMSE",
    "c08": "single-patch overfit reaches MSE < 1e-4 within 500 steps (both variants)",
    "c09": "fast kernel >= 2x speedup, checksum match, exact FLOP bookkeeping",
    "c10": "fixed seeds reproduce logs and checkpoints byte for byte",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status, word in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL"), ("skipped", "SKIP")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" not in nodeid:
                continue
            key = nodeid.split("::")[-1].split("_")[1]
            if key not in verdicts or word == "FAIL":
                verdicts[key] = word
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for key, label in CRITERIA.items():
        word = verdicts.get(key)
        if word is not None:
            terminalreporter.write_line(f"[{word}] criterion {int(key[1:]):2d}: {label}")
