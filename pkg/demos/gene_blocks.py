"""Partition genes into equal-size blocks and check that signature groups stay together."""

import numpy as np

from blockflow import blocks, synth

spec = synth.acceptance_spec(n_cells=10, n_genes=200)
data = synth.generate(spec, seed=0)

layout = blocks.build_blocks(data.embeddings, block_size=32, seed=0)
print(f"{layout.n_blocks} blocks of {layout.block_size} slots, {layout.n_padding} padding slots")
print("objective trace (first, last):", round(layout.objective_trace[0], 2), round(layout.objective_trace[-1], 2))

# each condition level has a 15-gene signature; count how many blocks each one lands in
owner = np.full(layout.slots.size, -1)
for j, block in enumerate(layout.slots.reshape(layout.n_blocks, -1)):
    owner[block[block >= 0]] = j
for f in spec.factors:
    for level, sig in f.signatures.items():
        spread = len(set(owner[sig["genes"]]))
        print(f"{f.name}={level}: signature genes in {spread} block(s)")
