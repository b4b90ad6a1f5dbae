"""How close do a unit's audio-only and video-only representations sit,
layer by layer?

The gap is the mean same-unit audio/video distance over the mean
different-unit distance: about 1 when the modalities are unrelated and
0 when they coincide. Distillation from audio teachers, with frames where
only video is visible, should pull the two views together as depth grows.

    python demos/cross_modal_gap.py --steps 1000 --out /tmp/gap
"""

import argparse
from dataclasses import replace
from pathlib import Path

from avkd.distill import pretrain
from avkd.pipeline import RunConfig, build_tasks, heldout_corpus, make_student
from avkd.probe import collect_unit_representations, cross_modal_gap, export_embeddings
from avkd.student import AUDIO_ONLY, VIDEO_ONLY
from avkd.synthdata import generate_corpus

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--out", type=Path, help="also export unit embeddings here")
args = ap.parse_args()

run = RunConfig()
run.train = replace(run.train, steps=args.steps)
corpus = generate_corpus(run.corpus)
held = heldout_corpus(run.corpus, run.heldout_utterances)
tasks = build_tasks(corpus, run.teachers, run.train.tau_prime, run.num_clusters, run.kmeans_seed,
                    run.kmeans_restarts)
model = make_student(run.student, tasks)
layers = list(range(model.config.num_blocks + 1))
U = run.corpus.num_units


def gaps():
    a = collect_unit_representations(model, held, AUDIO_ONLY, layers, U)
    v = collect_unit_representations(model, held, VIDEO_ONLY, layers, U)
    return a, v, [cross_modal_gap(a, v, l) for l in layers]


print("layer:        " + "  ".join(f"{l:>5}" for l in layers))
print("random init:  " + "  ".join(f"{g:5.3f}" for g in gaps()[2]))
pretrain(model, corpus, tasks, run.train)
a, v, g = gaps()
print("pretrained:   " + "  ".join(f"{x:5.3f}" for x in g))

if args.out:
    args.out.mkdir(parents=True, exist_ok=True)
    n = export_embeddings([a, v], args.out / "units.avkd")
    print(f"{n} rows -> {args.out / 'units.avkd'} (manifest alongside)")
