# %% [markdown]
# The command-line workflow, driven from Python
#
# The same calls work from a shell, e.g. `metacde gen --count 3 --out tasks`.

# %%
import pathlib
import tempfile

from metacde.cli import main

work = pathlib.Path(tempfile.mkdtemp(prefix="metacde-"))
cfg = work / "run.ini"
cfg.write_text("""[model]
feature_dim = 16
hidden = 32

[train]
steps = 50
checkpoint_every = 25
""")

# %%
main(["gen", "--variant", "standard", "--count", "3", "--seed", "0", "--out", str(work / "tasks")])
print(sorted(p.name for p in (work / "tasks").iterdir()))
print((work / "tasks" / "task_0.json").read_text())

# %%
main(["train", "--config", str(cfg), "--out", str(work / "run")])
print(sorted(p.name for p in (work / "run").iterdir()))

# %%
tasks = [str(work / "tasks" / f"task_{i}.csv") for i in range(3)]
main(["eval", "--checkpoint", str(work / "run" / "model.ckpt"), "--out", str(work / "eval"),
      "--tasks", *tasks, "--context-sizes", "15,50"])

# %%
main(["density", "--checkpoint", str(work / "run" / "model.ckpt"),
      "--context", tasks[0], "--x", "0.0", "--x", "0.5", "--out", str(work / "density")])
print((work / "density" / "density_0.csv").read_text().splitlines()[:8])
