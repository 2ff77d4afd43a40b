import numpy as np
import pytest

from grumpc import gru_model, harness, observer, plant_sim, sysid


def scaled_certified_weights(rng, n=4, p=1, target=-0.05, keep_output=True):
    """Random weights scaled until the stability residual drops below target.

    Bisection on a single scale factor applied to every array; the output
    map is restored afterwards (it does not enter the residual).
    """
    w = gru_model.random_weights(n, p, p, rng)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        cand = gru_model.GruWeights(
            n=n, m=p, p=p,
            **{k: mid * getattr(w, k) for k in gru_model.WEIGHT_FIELDS})
        if gru_model.diss_residual(cand) < target:
            lo = mid
        else:
            hi = mid
    cand = gru_model.GruWeights(
        n=n, m=p, p=p,
        **{k: lo * getattr(w, k) for k in gru_model.WEIGHT_FIELDS})
    if keep_output:
        cand = cand.replace(U_o=w.U_o, b_o=w.b_o)
    return cand


@pytest.fixture(scope="session")
def ph_params():
    return plant_sim.default_params()


@pytest.fixture(scope="session")
def desk_pipeline(tmp_path_factory):
    """Full desk-scale pipeline run once per session via the CLI commands."""
    out = tmp_path_factory.mktemp("desk")
    cfg = harness.ExperimentConfig()
    harness.cmd_generate_data(cfg, out)
    train_result = harness.cmd_train(cfg, out)
    observer_report = harness.cmd_synth_observer(cfg, out)
    validation = harness.cmd_validate(cfg, out)
    return {
        "out": out,
        "cfg": cfg,
        "train": train_result,
        "observer": observer_report,
        "validation": validation,
        "weights": gru_model.load_weights(out / "weights.json"),
        "gains": observer.load_gains(out / "gains.json"),
        "nmap": sysid.NormalizationMap.load(out / "normalization.json"),
    }
