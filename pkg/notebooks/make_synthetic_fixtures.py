"""Regenerate the bundled synthetic sequence fixtures.

The experimental naive sequence, deep-mutational-scanning effect table and
5-mer hotspot model are external data. These stand-ins have the same shapes
(657 nt, 219 codons x 20 amino acids, 5-mer contexts) so the sequence-level
code paths can be exercised end to end.
"""

from pathlib import Path

import numpy as np

from gcfit import seqmut

DATA = Path(seqmut.__file__).parent / "data"


def main(seed=20240607):
    rng = np.random.default_rng(seed)
    naive = seqmut.synthetic_naive(657, rng)
    (DATA / "synthetic_naive.txt").write_text(naive + "\n")
    seqmut.synthetic_affinity_model(naive, rng).to_csv(DATA / "synthetic_affinity.csv")
    seqmut.synthetic_context_model(k=5, base_rate=1.0, hotspot=10.0).to_csv(
        DATA / "synthetic_context.csv"
    )
    print(f"wrote fixtures to {DATA}")


if __name__ == "__main__":
    main()
