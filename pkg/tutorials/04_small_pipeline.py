"""
The whole pipeline, small
=========================

The same steps the command line runs, on a corpus and model small enough
to finish in well under a minute. The full-size run is
``mmsumm synth && mmsumm align && ...`` with the default configuration.
"""

import json
import tempfile

from mmsumm import pipeline
from mmsumm.config import load_config

work = tempfile.mkdtemp(prefix="mmsumm-")
cfg = load_config(None, [
    f"work_dir={json.dumps(work)}",
    "synth.episodes=40", "synth.split=[0.6,0.2,0.2]", "synth.N_range=[8,10]",
    "synth.event_count=3",
    "backbone.d_m=32", "backbone.n_heads=2", "backbone.d_ffn=64", "features.d_i=8",
    "backbone.L_max=64", "train.L_max=64", "adapter.d_B=8", "align.embed_dim=32",
    "pretrain.episodes=40", "pretrain.total_steps=150", "pretrain.warmup_steps=20",
    "train.total_steps=60", "train.emlm_cutoff=20", "train.warmup_steps=10",
    "selection.epochs=1", "selection.K=4", "selection.selector.d_m=16",
    "selection.selector.d_ffn=16", "selection.selector.d_i=4", "selection.selector.layers=1",
    "decode.max_len=16", "decode.beam=3",
])

pipeline.run_synth(cfg)
pipeline.run_align(cfg)
pipeline.run_pretrain(cfg)      # text-only backbone, all leaves trained
pipeline.run_train(cfg)         # adapters per variant, backbone frozen
pipeline.run_select(cfg)
pipeline.run_decode(cfg)
pipeline.run_eval(cfg)
print(pipeline.run_report(cfg))
print("artifacts in", work)
