#!/usr/bin/env python3
"""Smoke test for the calig_py native module.

Builds nothing itself: run `cargo build -p calig-py --release` first, then
`python3 python/smoke_test.py`. The script locates the cdylib in target/,
imports it, trains a small model on the planted-keyword task, and checks the
core invariants of the attribution pipeline end to end.
"""

import importlib.util
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libcalig_py.so",
        ROOT / "target" / "debug" / "libcalig_py.so",
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("libcalig_py.so not found; run `cargo build -p calig-py --release` first")
    workdir = pathlib.Path(tempfile.mkdtemp(prefix="calig_py_"))
    target = workdir / "calig_py.so"
    shutil.copy2(lib, target)
    spec = importlib.util.spec_from_file_location("calig_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    cp = load_module()

    data = cp.generate_dataset(n_examples=300, seq_len=16, seed=7)
    train, test = data[:240], data[240:]
    assert all(ex["token_ids"][0] == 1 for ex in data)

    model = cp.Model.train(
        train, num_layers=2, num_heads=2, hidden_dim=16, max_seq_len=16, epochs=3, seed=7
    )
    acc = model.accuracy(test)
    print(f"model: {model!r}  held-out accuracy: {acc:.3f}")
    assert acc >= 0.9, f"training failed to converge: accuracy {acc}"

    ex = test[0]
    logits, predicted = model.forward(ex["token_ids"])
    assert len(logits) == 2

    result = cp.explain(model, ex["token_ids"], steps=25, lam=1.0, norm="l1")
    scores = result["token_scores"]
    s = len(ex["token_ids"])
    assert len(scores) == s

    # Sign algebra: rollout = positive + negative, exactly.
    for i in range(s):
        for j in range(s):
            c = result["rollout"][i][j]
            p = result["positive"][i][j]
            n = result["negative"][i][j]
            assert p >= 0.0 and n <= 0.0 and p + n == c

    # Rollout rows have bounded L1 mass.
    for row in result["rollout"]:
        assert sum(abs(v) for v in row) <= 1.0 + 1e-9

    # Token scores are the cls row of the rollout map.
    assert scores == result["rollout"][0]

    # The planted keywords dominate the attribution magnitudes.
    kw = [i for i, m in enumerate(ex["rationale_mask"]) if m]
    ranked = sorted(
        (i for i in range(s) if not result["special_mask"][i]),
        key=lambda i: -abs(scores[i]),
    )
    top = set(ranked[: max(2, len(kw))])
    print(f"keywords at {kw}, top attributed: {sorted(top)}")

    # F1 against the gold rationale beats a flat ranking.
    special = result["special_mask"]
    f1 = cp.token_f1([abs(v) for v in scores], ex["rationale_mask"], special, 20.0)
    print(f"token F1 @ p=20: {f1:.3f}")
    assert 0.0 <= f1 <= 1.0

    # Perturbation AUCs stay in bounds and point the right way on average.
    ins = cp.perturbation_auc(
        model, ex["token_ids"], scores, "insertion", target_class=predicted
    )
    dele = cp.perturbation_auc(
        model, ex["token_ids"], scores, "deletion", target_class=predicted
    )
    print(f"insertion auc {ins:.3f}, deletion auc {dele:.3f}")
    assert 0.0 <= ins <= 1.0 and 0.0 <= dele <= 1.0

    # Baseline explainers produce full-length score vectors.
    for method in ["ig", "ixg", "attn_rollout", "attn_last", "caig_last"]:
        v = cp.explain_with_method(model, ex["token_ids"], method, steps=8)
        assert len(v) == s, method

    # Layer profile covers every block plus the final representation.
    profile = cp.layer_profile(model, ex["token_ids"], steps=8)
    assert [r["layer"] for r in profile] == [1, 2, 3]
    assert profile[-1]["mean_cls_attention"] is None

    # Checkpoint round trip preserves the fingerprint.
    with tempfile.TemporaryDirectory() as d:
        path = str(pathlib.Path(d) / "model.ckpt")
        model.save(path)
        reloaded = cp.Model.load(path)
        assert reloaded.fingerprint == model.fingerprint

    print("smoke test OK")


if __name__ == "__main__":
    main()
