"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np
import pytest

from seqctr.autodiff import Tensor, backward
from seqctr.data import GeneratorConfig, generate

FD_H = 1e-5
FD_TOL = 1e-4


def fd_check(build_loss, params: dict[str, Tensor], rng: np.random.Generator,
             entries_per_param: int = 6, h: float = FD_H, tol: float = FD_TOL) -> float:
    """Compare analytic gradients against central finite differences.

    `build_loss` must rebuild the scalar loss graph from current parameter
    values on every call. Checks a random subset of entries per parameter.
    Relative error uses |a - n| / (|a| + 1e-8) with a 1e-9 absolute guard for
    entries whose true gradient is zero (central differences bottom out at
    ~1e-11 from float cancellation). Returns the worst relative error seen.
    """
    loss = build_loss()
    backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(entries_per_param, n), replace=False)
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + h
            f_plus = build_loss().item()
            flat[idx] = keep - h
            f_minus = build_loss().item()
            flat[idx] = keep
            num = (f_plus - f_minus) / (2 * h)
            ana = grads[name].reshape(-1)[idx]
            err = abs(ana - num)
            rel = err / (abs(ana) + 1e-8)
            worst = max(worst, min(rel, err * 1e5))  # track informative magnitude
            assert rel < tol or err < 1e-9, (
                f"gradient mismatch at {name}[{idx}]: analytic={ana!r} numeric={num!r} rel={rel:.3g}"
            )
    return worst


@pytest.fixture(scope="session")
def small_bundle():
    cfg = GeneratorConfig(
        n_users=120, n_items=120, n_categories=12, n_train=1500, n_test=500,
        seq_len_min=8, seq_len_max=24, seed=11,
    )
    bundle, oracle, report = generate(cfg)
    return bundle, oracle, report


@pytest.fixture(scope="session")
def small_bundle_dir(small_bundle, tmp_path_factory):
    from seqctr.data import save_bundle

    bundle, _, report = small_bundle
    path = tmp_path_factory.mktemp("bundle_small")
    save_bundle(bundle, path, report)
    return path


@pytest.fixture(scope="session")
def default_bundle():
    """The full default-scale bundle; shared because generation costs seconds."""
    bundle, oracle, report = generate(GeneratorConfig())
    return bundle, oracle, report


def slice_detached_twin(attached, bundle):
    """The no-decoder twin whose weights are the attached model's restricted
    to the non-g inputs. The g slot fuses late (last MLP-stack input for the
    dnn, tail of the combination layer for the cross networks), so only the
    layer it joins needs slicing."""
    from seqctr.integration import CtrModel, IntegrationConfig

    cfg = attached.cfg
    twin = CtrModel(
        bundle.vocab, IntegrationConfig(backbone=cfg.backbone), np.random.default_rng(0), attached.dec_cfg
    )
    for name, tensor in twin.tables.items():
        tensor.weights.data = attached.tables[name].weights.data.copy()
    if twin.ta_params is not None:
        for name in twin.ta_params:
            twin.ta_params[name].data = attached.ta_params[name].data.copy()
    for name, p in twin.bb_params.items():
        src = attached.bb_params[name].data
        if name == "mlp.w1" and twin.bb_cfg.kind == "dnn":
            p.data = src[: twin.bb_cfg.input_width].copy()
        elif name == "head.w" and twin.bb_cfg.kind == "dcnv2":
            p.data = src[: p.data.shape[0]].copy()
        else:
            p.data = src.copy()
    return twin
