#!/usr/bin/env python3
"""Smoke test for the sgvi extension module.

Builds nothing itself: run `cargo build -p sgvi-python` (or --release) first,
then `python3 python/smoke_test.py`. The script locates the compiled cdylib,
exposes it as an importable module, and exercises the main types and
operations against closed-form expectations.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_sgvi():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libsgvi.so", "sgvi.so", "libsgvi.dylib")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("no compiled module found; run `cargo build -p sgvi-python` first")
    stage = Path(tempfile.mkdtemp(prefix="sgvi_py_"))
    shutil.copy2(built, stage / "sgvi.so")
    sys.path.insert(0, str(stage))
    import sgvi

    return sgvi


CHECKS = []


def check(name, condition, detail=""):
    CHECKS.append((name, bool(condition), detail))
    status = "ok" if condition else "FAIL"
    print(f"[{status}] {name}" + (f"  ({detail})" if detail else ""))


def main():
    sgvi = import_sgvi()

    # closed-form solver checks
    scores = [0.3, -1.2, 2.4, 0.0, -0.7]
    oracle = sgvi.softmax_oracle(scores)
    check("softmax sums to one", abs(sum(oracle) - 1.0) < 1e-12)

    result = sgvi.emd_infer(scores, max_iterations=50, seed=3)
    gap = max(abs(a - b) for a, b in zip(result["q"], oracle))
    check("emd matches softmax oracle", gap < 1e-6, f"L-inf gap {gap:.2e}")
    check("emd converged", result["converged"], f"{result['iterations_used']} iterations")

    lse = sgvi.log_sum_exp(scores)
    value = sgvi.elbo(scores, result["q"])
    check("elbo at optimum equals log-sum-exp", abs(value - lse) < 1e-9, f"|diff| {abs(value - lse):.2e}")

    pgd = sgvi.pgd_infer(scores, max_iterations=2000, tolerance=1e-12, initial_learning_rate=0.5, seed=3)
    gap = max(abs(a - b) for a, b in zip(pgd["q"], oracle))
    check("pgd reaches the same optimum", gap < 1e-3, f"L-inf gap {gap:.2e}")

    stepped = sgvi.emd_step([0.5, 0.5], [1.0, 0.0], 1.0)
    e = math.e
    check(
        "multiplicative update fixture",
        abs(stepped[0] - e / (e + 1)) < 1e-12 and abs(stepped[1] - 1 / (e + 1)) < 1e-12,
    )

    # instance round trip and structure
    instance = sgvi.sample_instance(seed=11, v_o=6, v_p=4, v_g=3, d=8, class_margin=10.0)
    parsed = sgvi.Instance.from_json(instance.to_json())
    check("instance JSON round trip", parsed.to_json() == instance.to_json())
    check(
        "triplet adjacency present",
        any(e == "po" for _, _, e in parsed.neighbors("predicate", 0)),
        repr(parsed),
    )

    # planted recovery with the oracle model
    model = sgvi.oracle_model(seed=11, v_o=6, v_p=4, v_g=3, d=8, class_margin=10.0)
    posteriors = sgvi.infer_graph(model, instance, seed=5)
    truth = instance.ground_truth()
    planted = {f"o{i}": z for i, z in enumerate(truth["objects"])}
    planted.update({f"p{j}": z for j, z in enumerate(truth["predicates"])})
    correct = sum(1 for key, z in planted.items() if posteriors[key]["map_label"] == z)
    check(
        "oracle model recovers planted labels",
        correct == len(planted),
        f"{correct}/{len(planted)}",
    )

    # posteriors normalize
    lp = posteriors["p0"]["log_posterior"]
    check("log posterior normalizes", abs(sum(math.exp(x) for x in lp) - 1.0) < 1e-9)

    # uniform posteriors under the zero model
    zero = sgvi.Model.zeros(8, 6, 4, 3)
    uniform = sgvi.infer_graph(zero, instance, seed=5)
    v_o = instance.vocab[0]
    lp0 = uniform["o0"]["log_posterior"]
    check(
        "zero model gives uniform posteriors",
        all(abs(x + math.log(v_o)) < 1e-9 for x in lp0),
    )

    # tiny exact enumeration against the variational decode
    tiny = sgvi.sample_instance(seed=2, m_range=(2, 2), v_o=3, v_p=2, v_g=2, d=4, class_margin=10.0)
    tiny_model = sgvi.oracle_model(seed=2, m_range=(2, 2), v_o=3, v_p=2, v_g=2, d=4, class_margin=10.0)
    marginals = sgvi.exact_gibbs_marginals(tiny_model, tiny)
    decoded = sgvi.infer_graph(tiny_model, tiny, seed=1)
    agree = sum(
        1
        for key, m in marginals.items()
        if key in decoded and m.index(max(m)) == decoded[key]["map_label"]
    )
    labelled = sum(1 for key in marginals if key in decoded)
    check("exact marginals agree on separable data", agree == labelled, f"{agree}/{labelled}")

    # loss and scalar metric
    loss = sgvi.instance_loss(tiny_model, tiny)
    check("planted loss is small", loss < 0.05, f"loss {loss:.4f}")
    ws = sgvi.weighted_score(75.44, 34.30, 35.38)
    check("weighted score fixture", abs(ws - 42.96) < 1e-9, f"{ws:.4f}")

    # model JSON round trip
    reloaded = sgvi.Model.from_json(model.to_json())
    check("model JSON round trip", json.loads(reloaded.to_json()) == json.loads(model.to_json()))

    failures = [name for name, ok, _ in CHECKS if not ok]
    print()
    if failures:
        print(f"{len(failures)} of {len(CHECKS)} checks failed: {failures}")
        sys.exit(1)
    print(f"all {len(CHECKS)} checks passed")


if __name__ == "__main__":
    main()
