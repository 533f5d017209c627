
# coding: utf-8

# # Master gates and stage variation
#
# The stage-aware LSTM splits its cell state into slots ordered from short
# horizon (low index) to long horizon (high index). Two cumulative-softmax
# "master" gates decide, at each visit, which slots keep history and which
# take the new candidate. This notebook walks through one cell update by hand.

# In[1]:

import numpy as np

from stagenet import autodiff as ad
from stagenet.stage_lstm import (StageCellState, cell_step, combine_cell, init_cell_params,
                                 master_from_distributions, stage_variation)

np.set_printoptions(precision=3, suppress=True)


# Start from one-hot distributions over five slots. The forget distribution
# points at slot 3 and the input distribution at slot 4 (1-based).

# In[2]:

f_master, i_master = master_from_distributions([0, 0, 1, 0, 0], [0, 0, 0, 1, 0])
print("f~", f_master.data[0])
print("i~", i_master.data[0])
print("w ", (f_master * i_master).data[0])


# Slots where only f~ is open copy the old cell value, slots where only i~ is
# open take the fresh candidate, and the overlap w mixes both like an
# ordinary LSTM.

# In[3]:

rng = np.random.default_rng(0)
f, i, c_prev, c_hat = (ad.constant(rng.uniform(0.1, 0.9, (1, 5))) for _ in range(4))
c = combine_cell(f_master, i_master, f, i, c_prev, c_hat).data[0]
print("c_prev", c_prev.data[0])
print("c_hat ", c_hat.data[0])
print("c     ", c)


# The stage variation is the expected position of the forget split,
# s = N_m * (1 - mean(f~)) + 1. Here three of five slots keep history, so
# s = 5 * 0.4 + 1 = 3. A large s means little history survived the update.

# In[4]:

s, s_norm = stage_variation(f_master)
print("s =", s.data.item(), " s_norm =", s_norm.data.item())


# ## A real cell step
#
# With learned weights the distributions are soft. The elapsed time since the
# previous visit is appended to both the visit and the hidden state before the
# gate logits are computed, so a long gap can move the split on its own.

# In[5]:

params = init_cell_params(n_features=3, hidden=8, chunk=2, rng=rng)
for w in params.weights.values():
    w.data[...] = rng.normal(0, 1, w.shape)
state = StageCellState.zeros(1, 8, params.n_master)
visit = rng.normal(size=3)
for gap in (0.5, 2.0, 8.0, 32.0):
    st = cell_step(visit, gap, state, params)
    print(f"gap {gap:5.1f}  f~ {st.master_forget.data[0]}  s {st.s.data.item():.3f}")
