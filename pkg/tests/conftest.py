import itertools

import numpy as np
import pytest

from seqpretrain.decode import length_penalty
from seqpretrain.nnet.model import EOS, SOS, ModelConfig, init_params
from seqpretrain.rng import derive_seed, make_rng


def tiny_config(**kw):
    base = dict(input_dim=6, vocab_size=5, d_model=8, heads=2, d_ff=12,
                enc_layers=1, dec_layers=1, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def perturbed_params(cfg, seed=0, mode="seq2seq", scale=0.1):
    """Init plus noise so biases/gains are not at their special initial values."""
    p = init_params(cfg, seed, mode)
    rng = np.random.default_rng(seed + 1000)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in p.items()}


def finite_difference(loss_fn, params, step=1e-4):
    """Central differences of ``loss_fn(params) -> float`` for every element."""
    out = {}
    for k, arr in params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = loss_fn(params)
            arr[idx] = old - step
            down = loss_fn(params)
            arr[idx] = old
            g[idx] = (up - down) / (2 * step)
        out[k] = g
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst per-tensor ``|g - fd|_inf / max(|g|_inf, |fd|_inf, floor * scale)``.

    ``scale`` is the largest gradient entry over all tensors. Some tensors
    (attention key biases) have an exactly zero gradient, where central
    differences only return round-off; the floor measures those against the
    overall gradient magnitude instead of dividing noise by noise.
    """
    scale = max(float(np.abs(a).max()) for a in analytic.values())
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = max(np.abs(a).max(), np.abs(n).max(), floor * scale)
        worst = max(worst, float(np.abs(a - n).max() / denom))
    return worst


class MockScorer:
    """Deterministic next-token distribution keyed on the full prefix."""

    def __init__(self, V, seed, temperature=2.0):
        self.V, self.seed, self.temperature = V, seed, temperature
        self.calls = 0

    def dist(self, prefix):
        z = make_rng(derive_seed(self.seed, *prefix)).standard_normal(self.V) * self.temperature
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    def __call__(self, prefixes):
        self.calls += 1
        return np.stack([self.dist(tuple(p)) for p in prefixes])


def exhaustive_best(scorer, V, max_len, alpha, exclude=()):
    """Enumerate every finished sequence of at most ``max_len`` tokens."""
    symbols = [v for v in range(V) if v not in exclude and v != EOS]
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product(symbols, repeat=n - 1):
            toks = (SOS,) + body + (EOS,)
            lp = sum(scorer.dist(toks[:i])[toks[i]] for i in range(1, len(toks)))
            key = (-lp / length_penalty(n, alpha), toks)
            if best is None or key < best[0]:
                best = (key, lp)
    (neg_score, toks), lp = best
    return toks, lp, -neg_score


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# -- acceptance report -------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): headline criterion, listed in the terminal summary")
    config.acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "setup":
        item.setup_seconds = rep.duration
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        seconds = rep.duration + (getattr(item, "setup_seconds", 0.0) if rep.when == "call" else 0.0)
        details = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
        item.config.acceptance_results.append(
            (mark.args[0], rep.outcome.upper(), seconds, details))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, seconds, details in results:
        terminalreporter.write_line(f"{outcome:<7} {name} ({seconds:.1f} s) {details}")
