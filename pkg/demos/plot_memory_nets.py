"""
Procedural memory
=================

The memory nets turn a recipe's step embeddings into one vector per step.
The text and image variants look only at earlier steps; the multimodal one
looks at the whole sequence.
"""

import torch

from procdiff.memory import AttentionBlock, MemoryNet, mmn_forward, tmn_forward

torch.manual_seed(0)
block = AttentionBlock(16, heads=4)
steps = torch.randn(5, 16)
memory = tmn_forward(block, steps).vectors
print("m_1 is zero:", bool(torch.all(memory[0] == 0)))

###############################################################################
# One causal pass gives the same m_j as re-running attention on each history.

for j in range(2, 6):
    again = block.attend(steps[: j - 1], causal=False)[-1]
    print(j, float((memory[j - 1] - again).abs().max()))

###############################################################################
# Changing step 3 leaves m_1..m_3 untouched and moves m_4 and m_5.

edited = steps.clone()
edited[2] += 1.0
diff = (tmn_forward(block, edited).vectors - memory).abs().amax(dim=1)
print("per-step change:", [round(float(d), 4) for d in diff])

###############################################################################
# The bi-directional block lets the last step influence the first.

full = AttentionBlock(16, heads=4, mask="full")
a = mmn_forward(full, steps).vectors[0]
b = mmn_forward(full, edited).vectors[0]
print("m_1 moved:", not torch.equal(a, b))

###############################################################################
# A fresh memory net adds exactly nothing to the timestep embedding, because
# its fusion head starts at zero.

net = MemoryNet("tmn", text_dim=16, image_dim=16, time_dim=8, dim=16, heads=4)
t_emb = torch.randn(5, 8)
print("neutral at init:", torch.equal(net.fuse(t_emb, net(steps).vectors), t_emb))
