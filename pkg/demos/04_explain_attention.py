"""Which parts of a 30 s window did the classifier look at?

The class token's attention to the 96 patch tokens in the last layer,
averaged over heads, gives one importance score per 0.3125 s patch. The
scores are written as CSV and drawn over the respiratory channels as SVG,
with the annotated apnea event shaded.

    python3 demos/04_explain_attention.py [out_dir]
"""

import sys

import numpy as np

from sleepvit.explain import explain, map_importance_to_samples, render_overlay
from sleepvit.model import ModelConfig, init_params
from sleepvit.signal_pipeline import Apnea, preprocess_record
from sleepvit.synthetic import GeneratorProfile, generate_subject

out_dir = sys.argv[1] if len(sys.argv) > 1 else "explain_demo"
rec = generate_subject(GeneratorProfile(seed=3, n_subjects=1, epochs_per_subject=(20, 20),
                                        apnea_rate_by_disorder={"OSA": 0.6}), 0)
seg = next(s for s in preprocess_record(rec) if s.apnea != Apnea.NoApnea)
print(f"segment {seg.subject_id}:{seg.index} {seg.apnea.name}, event at {seg.event_window} s")

# an untrained model keeps the demo fast; use a checkpoint from the CLI for real maps
params = init_params(ModelConfig(d_model=32, n_layers=2, n_heads=4, mlp_hidden=32,
                                 head_hidden=32, branch_hidden=16), seed=0)
imap = explain(params, seg.channel_data, f"{seg.subject_id}_{seg.index:04d}")
top = np.argsort(imap.scores)[::-1][:3]
ranges = map_importance_to_samples(imap.scores)
for i in top:
    r = ranges[i]
    print(f"patch {i:2d}  {r.start_time_s:7.4f}-{r.end_time_s:7.4f} s  importance {imap.scores[i]:.5f}")
print(f"importance sums to {imap.scores.sum():.4f} (the rest stays on the class token)")

for path in render_overlay(seg, imap, ("RF", "RC", "RA"), out_dir):
    print("wrote", path)
