"""Which motions let ranges pin down all seven alignment parameters?

For each canned geometry we build the Fisher information of the range
measurements with respect to (t, v, s) and report its rank, the class of
singularity and, where defined, the Cramer-Rao standard deviations.

    python3 demos/observability.py
"""

import numpy as np

from uwbalign.fim import fim
from uwbalign.sim import scenario_singular


def main():
    np.set_printoptions(precision=4, suppress=True)
    for kind in ("generic", "line", "planar", "sphere", "static"):
        ds = scenario_singular(kind, seed=0)
        rep = fim(ds, ds.truth.theta())
        print(f"{kind:>8}: rank {rep.rank}  class {rep.singular_class.value}")
        if rep.sigma is not None:
            print(f"          crlb sigma {rep.sigma}")
        if rep.certificate is not None:
            print(f"          null direction {rep.certificate}")


if __name__ == "__main__":
    main()
