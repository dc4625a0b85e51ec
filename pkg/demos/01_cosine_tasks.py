# %% [markdown]
# Cosine tasks and their true conditional densities
#
# Each task draws y ~ U(0, 1) and sets x = cos(a y + b) + noise.  For a fixed
# x the conditional p(y | x) has one bump per solution of cos(a y + b) = x,
# which is what makes these tasks a good test for density estimators.

# %%
import numpy as np

from metacde.datasets import cosine_true_conditional, gen_cosine_task
from metacde.metalearn import Grid, count_local_maxima

rng = np.random.default_rng(0)
task, params = gen_cosine_task(rng, 130, variant="standard", sigma=0.1, context_size=50)
print(params)
print("context", task.context_x.shape, "target", task.target_x.shape)

# %%
# the oracle is normalized on whatever evenly spaced grid it is given
grid = Grid(0.0, 1.0, 100)
for x_star in (-0.9, 0.0, 0.9):
    dens = cosine_true_conditional(params, x_star, grid.values)
    print(f"x*={x_star:+.1f}  modes={count_local_maxima(dens)}  "
          f"mass={dens.sum() * grid.spacing:.6f}")


# %%
def sparkline(values, width=50):
    """Crude text plot so the demo needs nothing beyond numpy."""
    bars = " .:-=+*#%@"
    v = np.interp(np.linspace(0, len(values) - 1, width), np.arange(len(values)), values)
    v = (v - v.min()) / (np.ptp(v) or 1.0)
    return "".join(bars[int(round(t * (len(bars) - 1)))] for t in v)


print(sparkline(cosine_true_conditional(params, 0.0, grid.values)))

# %%
# the hard variant widens both the frequency and the phase ranges
_, hard = gen_cosine_task(rng, 10, variant="hard")
print(hard)
