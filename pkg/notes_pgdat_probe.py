"""Probe PGD-AT training settings for anchor memorization + poisoning damage."""
import sys, time, dataclasses
import numpy as np
from batlab.synthdata import default_benchmark, KIND_MAIN, KIND_BENIGN, KIND_POISON
from batlab.training import BatConfig, OptimizerConfig, train, METHOD_PGD_AT
from batlab.attack import training_attack, evaluation_attack, AttackConfig, pgd
from batlab.metrics import clean_accuracy, adv_accuracy, classwise_cosine_distance
from batlab.model import predict_labels

SEED = 0
train100, test100 = default_benchmark("small", seed=SEED, poisoning_fraction=1.0)
train0, test0 = default_benchmark("small", seed=SEED, poisoning_fraction=0.0)

def probe(tag, hidden, epochs, lr, gain, eps, seed=0, bs=128, wd=5e-4,
          poisoning=1.0, steps=10):
    tr = train100 if poisoning == 1.0 else train0
    cfg = BatConfig(
        alpha=0.0, beta=0.0, sigma=0.15, tau=0.5,
        attack=training_attack(eps, steps=steps),
        eval_attack=evaluation_attack(eps),
        optimizer=OptimizerConfig(learning_rate=lr, momentum=0.9, weight_decay=wd,
                                  decay_epochs=(int(epochs*0.7), int(epochs*0.85))),
        hidden_dims=hidden, input_gain=gain, epochs=epochs, batch_size=bs, seed=seed,
    )
    t0 = time.time()
    rep = train(tr, METHOD_PGD_AT, cfg)
    dt = time.time() - t0
    m = rep.model
    out = {}
    # train-set fit per kind (clean + adv)
    for k in (KIND_MAIN, KIND_BENIGN, KIND_POISON):
        idx = np.flatnonzero(tr.kind == k)
        if len(idx) == 0:
            continue
        x, y = tr.features[idx], tr.labels[idx]
        out[f"fit_{k}"] = (clean_accuracy(m, x, y), adv_accuracy(m, x, y, cfg.eval_attack))
    # test per kind
    for k in (KIND_MAIN, KIND_BENIGN):
        idx = np.flatnonzero(test100.kind == k)
        x, y = test100.features[idx], test100.labels[idx]
        out[f"test_{k}"] = (clean_accuracy(m, x, y), adv_accuracy(m, x, y, cfg.eval_attack))
    cos = classwise_cosine_distance(m, test100.features[test100.kind == KIND_MAIN],
                                    test100.labels[test100.kind == KIND_MAIN], seed=1)
    print(f"{tag}: {dt:.0f}s fit main {out['fit_main'][0]:.2f}/{out['fit_main'][1]:.2f} "
          f"benign {out['fit_atypical_benign'][0]:.2f}/{out['fit_atypical_benign'][1]:.2f} "
          + (f"poison {out['fit_atypical_poisoning'][0]:.2f}/{out['fit_atypical_poisoning'][1]:.2f} "
             if 'fit_atypical_poisoning' in out else "")
          + f"| test main {out['test_main'][0]:.3f}/{out['test_main'][1]:.3f} "
          f"twins {out['test_atypical_benign'][0]:.2f}/{out['test_atypical_benign'][1]:.2f} "
          f"cos {cos.mean_similarity:.3f}")
    return m, out

if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a"
    if which == "a":
        probe("ep200 lr.02 h128 g20", (128,), 200, 0.02, 20.0, 0.05)
        probe("ep300 lr.02 h128 g20", (128,), 300, 0.02, 20.0, 0.05)
        probe("ep200 lr.05 h128 g20", (128,), 200, 0.05, 20.0, 0.05)
        probe("ep200 lr.02 h128 g20 e.07", (128,), 200, 0.02, 20.0, 0.07)
    elif which == "b":
        probe("ep300 lr.02 h128 g20 @0%", (128,), 300, 0.02, 20.0, 0.05, poisoning=0.0)
        probe("ep300 lr.02 h128 g20 @100%", (128,), 300, 0.02, 20.0, 0.05, poisoning=1.0)
