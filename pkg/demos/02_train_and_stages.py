
# coding: utf-8

# # Training StageNet on synthetic patients
#
# The generator plants stage boundaries: at each one the severity features
# jump, some other features shift, the outcome risk rises for a few visits,
# and the visit that opens the new stage follows a longer pause. We train a
# small model, then look at how its stage variation behaves around the
# planted boundaries. Runs in a few minutes on one core.

# In[1]:

import numpy as np

from stagenet.data import (GeneratorConfig, fit_normalizer, forward_fill_and_normalize,
                           generate_synthetic, split)
from stagenet.evaluation import auroc, risk_band_stage_table
from stagenet.model import ModelConfig, evaluate_traces, train

gen = GeneratorConfig(n_patients=150, boundary_gap_scale=8.0, instability_window=3, seed=0)
patients = generate_synthetic(gen)
p = patients[0]
print(p.patient_id, "visits:", len(p), "boundaries at", p.change_points)
print("positive rate:", np.mean(np.concatenate([q.labels for q in patients])).round(3))


# Split by patient, fit the normaliser on the training part only, and forward
# fill any gaps.

# In[2]:

train_raw, valid_raw, test_raw = split(patients, [0.7, 0.15, 0.15], seed=0)
stats = fit_normalizer(train_raw)
train_set, valid_set, test_set = (forward_fill_and_normalize(d, stats)
                                  for d in (train_raw, valid_raw, test_raw))


# In[3]:

config = ModelConfig(n_features=gen.n_features, hidden=16, chunk=2, window=10, epochs=12,
                     learning_rate=1e-2, dropout_p=0.1, dropconnect_p=0.1, seed=0)
ckpt, history = train(config, train_set, valid_set,
                      on_epoch=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['train_loss']:.4f}"
                                               f"  valid AUPRC {r['valid_auprc']:.3f}"))
print("kept epoch", ckpt.epoch)


# In[4]:

model = ckpt.build_model()
traces = model.predict(test_set)
print({k: round(v, 3) for k, v in evaluate_traces(traces).items()})


# ## Stage variation around the boundaries
#
# For every test visit take the signed distance to the nearest planted
# boundary and average s_norm by that offset. The model only sees the past,
# so nothing can move before offset 0.

# In[5]:

scores, offsets = [], []
for trace, seq in zip(traces, test_set):
    cps = np.array(seq.change_points)
    for t, s in zip(trace.steps, trace.s_norm):
        o = t - cps
        offsets.append(o[np.argmin(np.abs(o))] if len(cps) else 99)
        scores.append(s)
scores, offsets = np.array(scores), np.array(offsets)
for k in range(-3, 5):
    print(f"offset {k:+d}: mean s_norm {scores[offsets == k].mean():.4f}")
near = (np.abs(offsets) <= 2).astype(float)
print("AUROC of s_norm for 'within 2 visits of a boundary':", round(auroc(scores, near), 3))


# ## Stage variation by risk band
#
# Visits are grouped by predicted risk into low (<= 0.4), medium and high
# (>= 0.7) bands.

# In[6]:

y = np.concatenate([t.y_hat for t in traces])
s = np.concatenate([t.s for t in traces])
for band, row in risk_band_stage_table(y, s).items():
    print(band, row and {k: round(v, 3) for k, v in row.items()})
