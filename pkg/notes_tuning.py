"""Scratch harness for tuning benchmark + training defaults (not shipped)."""
import sys, time
import numpy as np
from batlab.synthdata import default_benchmark, KIND_MAIN, KIND_BENIGN, KIND_POISON
from batlab.memorization import (EstimatorTrainerConfig, run_trials, estimate_memorization,
                                 estimate_influence, predictability, partition_splits,
                                 SplitThresholds)
from batlab.training import BatConfig, OptimizerConfig, train, METHOD_PGD_AT, METHOD_BAT, METHOD_ERM
from batlab.attack import AttackConfig, training_attack, evaluation_attack
from batlab.metrics import clean_accuracy, adv_accuracy, classwise_cosine_distance

SEED = 0

def build_data(poisoning):
    return default_benchmark("small", seed=SEED, poisoning_fraction=poisoning)

def estimate(train_set, test_set, trials=40, jobs=4):
    t0 = time.time()
    tr = run_trials(train_set, test_set, EstimatorTrainerConfig(), trials=trials,
                    inclusion_rate=0.7, base_seed=SEED + 1000, jobs=jobs)
    mem = estimate_memorization(tr)
    infl = estimate_influence(tr)
    pred = predictability(tr)
    splits = partition_splits(mem, infl, pred, SplitThresholds())
    print(f"estimation: {time.time()-t0:.0f}s; atypical {len(splits.train_atypical)}, "
          f"typical {len(splits.train_typical)}, unassigned {len(splits.train_unassigned)}; "
          f"test atypical {len(splits.test_atypical)}, test typical {len(splits.test_typical)}")
    return mem, infl, pred, splits

def check_crit6(train_set, mem):
    nonmain = train_set.kind != KIND_MAIN
    main = ~nonmain
    frac_atyp = (mem.mem[nonmain] > 0.15).mean()
    frac_typ = (mem.mem[main] < 0.02).mean()
    # control: main sample closest to class-0 center
    specs = train_set.provenance["specs"]
    c0 = np.asarray(next(s["center"] for s in specs if s["kind"] == "main" and s["class_id"] == 0))
    main_idx = np.flatnonzero(main & (train_set.labels == 0))
    control = main_idx[np.argmin(np.linalg.norm(train_set.features[main_idx] - c0, axis=1))]
    print(f"crit6: non-main mem>0.15: {frac_atyp:.3f}; main mem<0.02: {frac_typ:.3f}; "
          f"control |mem|={abs(mem.mem[control]):.3f}")
    return frac_atyp, frac_typ

def run_method(train_set, method, cfg, mem_values=None):
    ds = train_set
    if mem_values is not None:
        ds = train_set.subset(np.arange(len(train_set)))
        ds.mem = mem_values
    t0 = time.time()
    rep = train(ds, method, cfg)
    print(f"  {method} trained in {time.time()-t0:.0f}s")
    return rep.model

def eval_model(model, test_set, splits, eval_atk, label=""):
    out = {}
    for name, idx in [("all", np.arange(len(test_set))),
                      ("typical", splits.test_typical),
                      ("atypical", splits.test_atypical)]:
        if len(idx) == 0:
            out[name] = (float("nan"), float("nan"))
            continue
        x, y = test_set.features[idx], test_set.labels[idx]
        out[name] = (clean_accuracy(model, x, y), adv_accuracy(model, x, y, eval_atk))
    cos = classwise_cosine_distance(model, test_set.features[splits.test_typical],
                                    test_set.labels[splits.test_typical], seed=1)
    print(f"  {label}: all {out['all'][0]:.3f}/{out['all'][1]:.3f}  "
          f"typ {out['typical'][0]:.3f}/{out['typical'][1]:.3f}  "
          f"atyp {out['atypical'][0]:.3f}/{out['atypical'][1]:.3f}  "
          f"cos_sim {cos.mean_similarity:.4f}")
    return out, cos.mean_similarity


if __name__ == "__main__":
    mode = sys.argv[1] if len(sys.argv) > 1 else "all"
    train100, test100 = build_data(1.0)
    train0, test0 = build_data(0.0)
    assert np.array_equal(test100.features, test0.features)

    mem, infl, pred, splits = estimate(train100, test100)
    check_crit6(train100, mem)

    eps = 0.05
    cfg = BatConfig(
        alpha=1.0, beta=0.2, sigma=0.15, tau=0.5,
        attack=training_attack(eps),
        eval_attack=evaluation_attack(eps),
        optimizer=OptimizerConfig(learning_rate=0.02, momentum=0.9,
                                  weight_decay=5e-4, decay_epochs=(30, 45)),
        hidden_dims=(64, 64), epochs=60, batch_size=128, seed=SEED,
    )
    # mem values for the 0% dataset: subset of the 100% ones (poison rows dropped)
    keep0 = train100.kind != KIND_POISON
    mem0 = mem.mem[keep0]

    import dataclasses
    for seed in (0, 1):
        c = dataclasses.replace(cfg, seed=seed)
        print(f"--- seed {seed}")
        m_pgd0 = run_method(train0, METHOD_PGD_AT, c)
        r0, cos0 = eval_model(m_pgd0, test0, splits, cfg.eval_attack, "PGD-AT @0%")
        m_pgd100 = run_method(train100, METHOD_PGD_AT, c)
        r100, cos100 = eval_model(m_pgd100, test100, splits, cfg.eval_attack, "PGD-AT @100%")
        try:
            m_bat = run_method(train100, METHOD_BAT, c, mem_values=mem.mem)
            rb, cosb = eval_model(m_bat, test100, splits, cfg.eval_attack, "BAT @100%")
        except Exception as e:
            print("  BAT failed:", type(e).__name__, e)
            rb = None
        gap_adv = r0["typical"][1] - r100["typical"][1]
        rec = ((rb["typical"][1] - r100["typical"][1]) / gap_adv
               if (rb is not None and gap_adv) else float("nan"))
        print(f"  crit7 gap (atyp clean-adv): {r100['atypical'][0]-r100['atypical'][1]:.3f}")
        print(f"  crit8 typical drop clean {r0['typical'][0]-r100['typical'][0]:.3f} "
              f"adv {gap_adv:.3f}")
        print(f"  crit9 cos_sim 100 vs 0: {cos100:.4f} vs {cos0:.4f} (want 100 higher)")
        print(f"  crit10 recovery: {rec:.2f}")
