"""Run one phantom experiment and write its results as JSON.

    python scripts/run_experiment.py recovery --out results/recovery.json
    python scripts/run_experiment.py inpaint --steps 600
    python scripts/run_experiment.py synth --steps 1500
    python scripts/run_experiment.py inpaint-reg --urnet results/urnet.ckpt --inpaint results/inpaint_pconv.ckpt
    python scripts/run_experiment.py latency --urnet results/urnet.ckpt

Trained checkpoints land next to the JSON file.
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from thermoreg.experiments import (InpaintSettings, RecoverySettings, SynthSettings, inpainting_ablation,
                                   inpainting_helps_registration, latency_scaling, registration_recovery,
                                   synthesis_ablation)
from thermoreg.neural import NetworkParams
from thermoreg.phantom import gen_corpus
from thermoreg.register import URNet, load_urnet


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=["recovery", "inpaint", "synth", "inpaint-reg", "latency"])
    p.add_argument("--out", help="result JSON (default results/<experiment>.json)")
    p.add_argument("--steps", type=int, help="training steps override")
    p.add_argument("--n-train", type=int, default=28)
    p.add_argument("--n-test", type=int, default=11)
    p.add_argument("--urnet", help="UR-Net checkpoint (inpaint-reg, latency)")
    p.add_argument("--inpaint", help="inpainting checkpoint (inpaint-reg)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    out = Path(args.out or f"results/{args.experiment}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    over = {"steps": args.steps} if args.steps is not None else {}

    if args.experiment == "latency":
        net = load_urnet(NetworkParams.load(args.urnet)) if args.urnet else URNet().eval()
        res = latency_scaling(net)
    else:
        train, test = gen_corpus(args.n_train, args.n_test)
        if args.experiment == "recovery":
            res, params = registration_recovery(train, test, dataclasses.replace(RecoverySettings(), **over))
            params.save(out.parent / "urnet.ckpt")
        elif args.experiment == "inpaint":
            res, params = inpainting_ablation(train, test, dataclasses.replace(InpaintSettings(), **over))
            for kind, pr in params.items():
                pr.save(out.parent / f"inpaint_{kind}.ckpt")
        elif args.experiment == "synth":
            res, gens = synthesis_ablation(train, test, dataclasses.replace(SynthSettings(), **over))
            for tag, g in gens.items():
                g.save(out.parent / f"G_{tag}.ckpt")
        else:
            if not (args.urnet and args.inpaint):
                p.error("inpaint-reg needs --urnet and --inpaint")
            res = inpainting_helps_registration(test, NetworkParams.load(args.urnet), NetworkParams.load(args.inpaint))
    out.write_text(json.dumps(res, indent=2))
    print(json.dumps({k: v for k, v in res.items() if k != "cases"}, indent=2))


if __name__ == "__main__":
    main()
