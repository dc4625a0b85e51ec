# %% [markdown]
# Meta-training a density model and querying it on an unseen task
#
# Training streams fresh cosine tasks.  Every step splits 16 tasks into 50
# context and 80 target points, contrasts the targets with noise drawn from a
# KDE of the task's responses, and takes one Adam step.  At test time the
# context set alone defines the density; there is no retraining.
#
# Run with a step count argument, e.g. `python 02_train_and_predict.py 3000`.
# A few thousand steps are needed before the densities turn multimodal.

# %%
import sys
import time

import numpy as np

from metacde.datasets import cosine_true_conditional, gen_cosine_task
from metacde.metalearn import (
    Grid,
    MetaModel,
    TrainConfig,
    count_local_maxima,
    heldout_loglik,
    make_grid,
    predict_density,
    train,
)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
rng = np.random.default_rng(0)
model = MetaModel.init(rng, feature_dim=32, hidden=64, depth=3, reg_lambda=0.1)


def stream(seed):
    r = np.random.default_rng(seed)
    while True:
        yield gen_cosine_task(r, 130)[0]


# %%
t0 = time.time()


def report(step, loss, m):
    if (step + 1) % 100 == 0:
        print(f"step {step + 1:5d}  loss/target {loss:.3f}  ({time.time() - t0:.0f}s)")


model, trace = train(stream(1), TrainConfig(steps=steps), model, rng, callback=report)
# a model that only matched the noise density would sit near 3.35 per target
print("first 50 steps", np.mean(trace[:50]), "last 50 steps", np.mean(trace[-50:]))

# %%
task, params = gen_cosine_task(np.random.default_rng(99), 130, context_size=50)
grid = make_grid(task.all_y)
est = predict_density(model, task.context_x, task.context_y, 0.0, grid)
# the truth lives on [0, 1]; give it its own grid
truth = cosine_true_conditional(params, 0.0, Grid(0.0, 1.0, 100).values)
print("raw log normalizer", round(est.raw_log_normalizer, 4))
print("modes: model", count_local_maxima(est.log_density), " truth", count_local_maxima(truth))

# %%
ll = heldout_loglik(model, task.context_x, task.context_y, task.target_x, task.target_y, grid)
print(f"held-out log-likelihood over {task.n_target} targets: {ll:.2f}")
