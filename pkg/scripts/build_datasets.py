"""Regenerate the shipped reference datasets (slow: about two hours on one core)."""
import argparse
import logging
from pathlib import Path

import numpy as np

from cardiometa.circuit import reference_netlist
from cardiometa.sampling import design_from_netlist, generate_dataset, save_dataset, sobol_sequence

DATA = Path(__file__).resolve().parents[1] / "src" / "cardiometa" / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--which", choices=["pre", "post", "model3", "all"], default="all")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    net = reference_netlist("model2_pah")
    if args.which in ("pre", "all"):
        pre = net.without_group("shunt")
        design = design_from_netlist(pre, 512, seed=7, second_order=False)
        ds = generate_dataset(pre, design, workers=args.workers, chunk_size=512, progress=True)
        save_dataset(ds, args.out / "model2_pre.csv.gz")
    if args.which in ("post", "all"):
        design = design_from_netlist(net, 2560, seed=11, second_order=False)
        ds = generate_dataset(net, design, workers=args.workers, chunk_size=512, progress=True)
        save_dataset(ds, args.out / "model2_pah.csv.gz")
    if args.which in ("model3", "all"):
        net3 = reference_netlist("model3_transport")
        params = net3.sampled_parameters()
        lo = np.array([p.low for p in params])
        hi = np.array([p.high for p in params])
        rows = lo + sobol_sequence(len(params), 3750, seed=13) * (hi - lo)
        ds = generate_dataset(net3, (rows, [p.name for p in params]), transport=True, workers=args.workers,
                              chunk_size=250, seed=13, progress=True)
        save_dataset(ds, args.out / "model3_transport.csv.gz")


if __name__ == "__main__":
    main()
