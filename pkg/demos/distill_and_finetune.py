"""Pretrain a student by distillation, then finetune on five labelled
utterances and compare against the same budget from random weights.

Evaluation feeds video only, so any gain has to come from what the
audio teachers taught the shared encoder.

    python demos/distill_and_finetune.py            # full 2000 steps, ~30 s
    python demos/distill_and_finetune.py --steps 300
"""

import argparse
import copy
from dataclasses import replace

from avkd.distill import finetune, frame_accuracy, init_classifier, pretrain
from avkd.pipeline import RunConfig, build_tasks, heldout_corpus, make_student
from avkd.student import BOTH, VIDEO_ONLY
from avkd.synthdata import generate_corpus

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

run = RunConfig().with_seed(args.seed)
run.train = replace(run.train, steps=args.steps)
corpus = generate_corpus(run.corpus)
held = heldout_corpus(run.corpus, run.heldout_utterances)
tasks = build_tasks(corpus, run.teachers, run.train.tau_prime, run.num_clusters, run.kmeans_seed,
                    run.kmeans_restarts)
for t in tasks:
    print(f"teacher {t.name}: r={t.ratio}, {t.codebook.num_clusters} clusters")


def report(step_every=250):
    def on_step(_, rep):
        if rep.step % step_every == 0:
            print(f"  step {rep.step:>5}  total {rep.total:8.3f}  weights "
                  + " ".join(f"{k}={v:.2f}" for k, v in rep.weights.items()))
    return on_step


student = make_student(run.student, tasks)
print(f"student: {student.num_parameters()} parameters")
reports = pretrain(student, corpus, tasks, run.train, on_step=report())
k = min(100, len(reports))
first = sum(r.total for r in reports[:k]) / k
last = sum(r.total for r in reports[-k:]) / k
print(f"mean loss first {k} steps {first:.3f}, last {k} steps {last:.3f}")

labelled = corpus[:run.finetune_utterances]
for name, model in (("pretrained", copy.deepcopy(student)), ("scratch", make_student(run.student, tasks))):
    cls = init_classifier(model.config.encoder_dim, run.corpus.num_units, run.train.seed)
    finetune(model, cls, labelled, run.train, tasks)
    accs = {m: frame_accuracy(model, cls, held, m) for m in (BOTH, VIDEO_ONLY)}
    print(f"{name:>10}: audio+video {accs[BOTH]:.3f}  video only {accs[VIDEO_ONLY]:.3f}")
