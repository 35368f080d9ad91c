#!/usr/bin/env python3
"""Upper-bound probe for a data regime: put copies of the target itself (adversarial
label) into the poison slots and train a victim. If even this rarely flips the
target, no eps-bounded poison can; useful before spending hours on brewing."""
import argparse
from dataclasses import replace

import numpy as np

from poisonbrew import analysis, nn, pipeline
from poisonbrew import autograd as ag
from poisonbrew.autograd import Tensor
from poisonbrew.config import ExperimentConfig, with_overrides
from poisonbrew.trainer import train_victim


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cases", type=int, default=3)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = with_overrides(ExperimentConfig(), dict(s.split("=", 1) for s in args.set))
    train, val = pipeline.load_data(cfg)
    spec = pipeline.model_spec(cfg, train)
    vcfg = pipeline.victim_config(cfg)
    flips = 0
    for i, case in enumerate(pipeline.make_cases(cfg, train, val)[:args.cases]):
        target = val.images[val.positions(case.target_ids)]
        images = train.images.copy()
        images[train.positions(case.poison_ids)] = target[0]
        trace = train_victim(train.with_images(images), spec, replace(vcfg, seed=analysis.victim_seed(vcfg.seed, i, 0)),
                             validation=val)
        with ag.no_grad():
            probs = ag.softmax(nn.logits(trace.params, Tensor(target))).data[0]
        flips += int(np.argmax(probs) == case.adv_class)
        print(f"case {i}: {case.target_class} -> {case.adv_class}  p_adv {probs[case.adv_class]:.3f}  "
              f"p_true {probs[case.target_class]:.3f}  val acc {trace.val_acc[-1]:.3f}", flush=True)
    print(f"{flips}/{args.cases} targets flipped by insertion")


if __name__ == "__main__":
    main()
