import numpy as np
import pytest

from daskt import autodiff as ad
from daskt.ingest import InteractionRecord, StudentSequence


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(fn, arrays, rng, h=1e-5) -> float:
    """Relative error between the backprop gradient and central differences.

    ``fn`` maps tensors to a tensor; it is reduced to a scalar with a fixed
    random projection so every output element contributes. The gradients of
    all inputs are compared as one vector: a block whose true gradient is
    exactly zero (attention logits shifted by a per-node constant, say) would
    otherwise compare rounding noise with rounding noise.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy()) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    ad.sum_(ad.mul(out, proj)).backward()

    def value(arrs):
        o = fn(*[ad.Tensor(x) for x in arrs])
        return float(np.sum(o.data * proj))

    got, num = [], []
    for i, a in enumerate(arrays):
        fd = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][j] += h
            minus[i][j] -= h
            fd[j] = (value(plus) - value(minus)) / (2 * h)
        num.append(fd.ravel())
        g = tensors[i].grad
        got.append(np.zeros(a.size) if g is None else np.ravel(g))
    return rel_error(np.concatenate(got), np.concatenate(num))


def rec(student="s1", kc="k1", correct=1, start=0, rt=1000.0, att=1, problem="p1", end=None, rid=None):
    return InteractionRecord(
        student_id=student, problem_id=problem, kc_id=kc, correct=correct, start_time=start,
        end_time=start + int(rt) if end is None else end, response_time_ms=rt, attempt_count=att,
        record_id=rid,
    )


def seq(records, student=None):
    return StudentSequence(student or records[0].student_id, list(records))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**kw):
    from daskt.model import ModelConfig

    base = dict(n_problems=6, n_kcs=3, d_p=4, d_k=3, d_r=2, d_aff=5, d=6, heads=2, dtype="float64", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, B=3, T=7, lengths=None, n_problems=6, n_kcs=3, n_affects=4):
    from daskt.model import Batch

    lengths = lengths if lengths is not None else rng.integers(2, T + 1, B)
    mask = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    problems = np.where(mask, rng.integers(1, n_problems + 1, (B, T)), 0)
    kcs = np.where(mask, rng.integers(1, n_kcs + 1, (B, T)), 0)
    correct = np.where(mask, rng.integers(0, 2, (B, T)), 0)
    affects = np.where(mask, rng.integers(0, n_affects, (B, T)), -1)
    return Batch(problems, kcs, correct, mask, affects, [f"s{i}#0" for i in range(B)])


# --- acceptance bookkeeping: one pass/fail line per criterion ---------------------

_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(tag, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], {"title": m.args[1], "outcomes": []})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for tag, entry in _CRITERIA.items():
        if report.keywords.get(f"criterion_{tag}"):
            entry["outcomes"].append(report.outcome)


def pytest_itemcollected(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.keywords[f"criterion_{m.args[0]}"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(_CRITERIA):
        entry = _CRITERIA[tag]
        outs = entry["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif all(o == "passed" for o in outs):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"{tag} {entry['title']}: {status} ({outs.count('passed')}/{len(outs)} tests)")
