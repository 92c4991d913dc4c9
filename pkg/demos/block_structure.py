"""Look inside one linear GFMM block.

Builds a random single-channel block, assembles its matrix and checks that
the far-field (off-diagonal) tiles at each level have rank at most P, the
hierarchical low-rank pattern an FMM matrix has.

    python demos/block_structure.py
"""

import numpy as np

from gfmm.block1d import GFMMBlock1D, GFMMConfig, assemble_dense, param_count

cfg = GFMMConfig(D=256, L=4)
block = GFMMBlock1D.random(cfg, np.random.default_rng(0), scale=1.0)
G = assemble_dense(block)
print(f"D={cfg.D}, L={cfg.L}, P={cfg.P}: {param_count(cfg)} weights for a {G.shape[0]}x{G.shape[1]} matrix "
      f"({G.size} entries)")

for level in range(1, cfg.L + 1):
    n = 2 ** level
    size = cfg.D // n
    ranks = []
    for i in range(n):
        for j in range(n):
            # tiles two or more boxes apart are not touched by the bridges at this level
            if abs(i - j) >= 2:
                tile = G[i * size:(i + 1) * size, j * size:(j + 1) * size]
                s = np.linalg.svd(tile, compute_uv=False)
                ranks.append(int(np.sum(s > 1e-10 * max(s[0], 1e-300))))
    if ranks:
        print(f"level {level}: {len(ranks):3d} far-field tiles of size {size:3d}, max rank {max(ranks)}")
