import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from metamix import config as cfgmod
from metamix.cli import main
from metamix.experiment import ablation_table, run_ablation, sign_test, train
from metamix.tasks import TaskSource, write_csv_tasks

TINY = """\
# small classification run used across the CLI tests
pool.kind = nme
pool.n_sets = 3
pool.classes_per_set = 4
pool.dim = 6
pool.n_T = 10
pool.n_eval_pool = 20
model.hidden = 8
meta.inner_lr = 0.3
meta.outer_lr = 0.01
meta.optimizer = adam
meta.task_batch = 2
meta.k_support = 2
meta.k_query = 2
augment.strategy = MetaMix
run.budget = 6
run.eval_every = 3
run.n_eval_tasks = 7
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.txt"
    p.write_text(TINY)
    return p


# --- config ---------------------------------------------------------------------


def test_round_trip():
    cfg = cfgmod.parse(TINY)
    assert cfgmod.parse(cfgmod.serialize(cfg)) == cfg
    assert cfgmod.serialize(cfgmod.parse(cfgmod.serialize(cfg))) == cfgmod.serialize(cfg)


def test_unknown_key_rejected_with_path():
    with pytest.raises(cfgmod.ConfigError, match="meta.inner_rate"):
        cfgmod.parse("meta.inner_rate = 0.1")
    with pytest.raises(cfgmod.ConfigError, match="unknown section"):
        cfgmod.parse("optim.lr = 0.1")


def test_bad_values():
    with pytest.raises(cfgmod.ConfigError, match="run.budget"):
        cfgmod.parse("run.budget = many")
    with pytest.raises(cfgmod.ConfigError, match="augment.strategy"):
        cfgmod.parse("pool.kind = sinusoid\naugment.strategy = MMCF")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("augment.strategy = Cutmix")
    with pytest.raises(cfgmod.ConfigError, match="line 1"):
        cfgmod.parse("just words")


def test_override_flips_only_that_key():
    base = cfgmod.parse(TINY)
    flipped = cfgmod.parse(TINY, ["augment.strategy=None"])
    a = cfgmod.serialize(base).splitlines()
    b = cfgmod.serialize(flipped).splitlines()
    assert [x for x, y in zip(a, b) if x != y] == ["augment.strategy = MetaMix"]


def test_missing_file(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="absent.txt"):
        cfgmod.load(tmp_path / "absent.txt")


# --- train / eval ---------------------------------------------------------------


def test_cli_missing_config_exit_code(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.txt")]) == 2
    assert "absent.txt" in capsys.readouterr().err


def test_train_twice_identical_artifacts(tiny, tmp_path):
    names = ("summary.csv", "trainlog.jsonl", "final.ckpt", "best.ckpt", "config.txt")
    snapshots = []
    for _ in range(2):
        assert main(["train", "--config", str(tiny), "--seed", "7", "--out", str(tmp_path)]) == 0
        snapshots.append({n: (tmp_path / n).read_bytes() for n in names})
    assert snapshots[0] == snapshots[1]


def test_trainlog_records(tiny, tmp_path):
    main(["train", "--config", str(tiny), "--out", str(tmp_path)])
    recs = [json.loads(line) for line in (tmp_path / "trainlog.jsonl").read_text().splitlines()]
    iters = [r for r in recs if r["kind"] == "iter"]
    assert [r["step"] for r in iters] == list(range(1, 7))
    assert [r["step"] for r in recs if r["kind"] == "eval"] == [3, 6]
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 2 and {"test_pre", "test_post", "test_gap"} <= set(rows[0])


def test_eval_reproduces_final_record(tiny, tmp_path):
    main(["train", "--config", str(tiny), "--out", str(tmp_path / "run")])
    final = [json.loads(line) for line in (tmp_path / "run" / "trainlog.jsonl").read_text().splitlines()][-1]
    assert main(["eval", "--config", str(tiny), "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader(open(tmp_path / "ev" / "eval.csv")))
    assert rows[0] == ["task_id", "n_query", "acc_pre", "acc_post"]
    per_task = rows[1:-1]
    assert len(per_task) == 7
    assert float(rows[-1][2]) == final["test_pre"]
    assert float(rows[-1][3].split("+-")[0]) == final["test_post"]


def test_eval_rejects_mismatched_checkpoint(tiny, tmp_path, capsys):
    main(["train", "--config", str(tiny), "--out", str(tmp_path / "run")])
    code = main(["eval", "--config", str(tiny), "--override", "model.hidden=9",
                 "--checkpoint", str(tmp_path / "run" / "final.ckpt"), "--out", str(tmp_path / "ev")])
    assert code == 2
    assert "does not match" in capsys.readouterr().err


def test_regression_eval_has_r2_columns(tmp_path):
    rng = np.random.default_rng(0)
    sources = [TaskSource(x=rng.normal(size=(8, 2)), y=rng.normal(size=(8, 1)), task_id=f"a{t}",
                          fixed_split=np.array([0] * 5 + [1] * 3)) for t in range(4)]
    write_csv_tasks(tmp_path / "tasks.csv", sources)
    cfg = tmp_path / "reg.txt"
    cfg.write_text(f"pool.kind = csv\npool.csv_path = {tmp_path / 'tasks.csv'}\nmodel.hidden = 4\n"
                   "run.budget = 2\nrun.eval_every = 1\nrun.n_eval_tasks = 4\nmeta.task_batch = 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "run" / "best.ckpt"),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader(open(tmp_path / "ev" / "eval.csv")))
    assert rows[0][-2:] == ["r2_pre", "r2_post"]
    assert len(rows) == 1 + 4 + 1
    assert rows[-1][-1].startswith("over_0.3=")


def test_budget_zero_returns_init():
    cfg = cfgmod.parse(TINY, ["run.budget=0"])
    res = train(cfg)
    assert res.records == []
    assert all(a.tobytes() == b.tobytes() for a, b in zip(res.theta.arrays(), res.best_theta.arrays()))


def test_divergence_exit_code(tiny, tmp_path, capsys):
    code = main(["train", "--config", str(tiny), "--out", str(tmp_path),
                 "--override", "meta.divergence_threshold=1e-9"])
    assert code == 4
    assert "diverged" in capsys.readouterr().err


# --- verify -----------------------------------------------------------------------


def test_verify_beta_passes(capsys):
    assert main(["verify", "beta"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 9


def test_verify_lemma1_refuses_divergent_constant(capsys):
    assert main(["verify", "lemma1", "--alpha", "0.5", "--beta", "0.5"]) == 2
    assert "--eps-clamp" in capsys.readouterr().err


def test_verify_theorem2_small(capsys):
    code = main(["verify", "theorem2", "--instances", "1", "--mc-samples", "100000", "--deltas", "0.8"])
    assert code == 0
    assert "published two-term form" in capsys.readouterr().out


def test_verify_tolerance_breach_exit_code(capsys):
    # the published two-term channel-shuffle form misses the Monte-Carlo expectation
    code = main(["verify", "theorem2", "--instances", "2", "--mc-samples", "100000", "--form", "paper"])
    assert code == 3


# --- ablate -----------------------------------------------------------------------


def test_sign_test():
    assert sign_test(5, 5) == pytest.approx(1 / 32)
    assert sign_test(4, 5) == pytest.approx(6 / 32)
    assert sign_test(0, 3) == 1.0


def test_ablation_single_strategy_is_train():
    cfg = cfgmod.parse(TINY, ["augment.strategy=None"])
    (row,) = run_ablation(cfg, ["None"], [cfg.run.seed])
    fe = train(cfg).final_eval
    assert (row.pre, row.post) == (fe["test_pre"], fe["test_post"])


def test_ablation_table_rows(tiny, tmp_path):
    assert main(["ablate", "--config", str(tiny), "--out", str(tmp_path), "--strategies", "None", "MixSS",
                 "--seeds", "0", "1"]) == 0
    rows = list(csv.reader(open(tmp_path / "ablation.csv")))
    per_run = [r for r in rows[1:] if r[1].isdigit()]
    assert len(per_run) == 4
    assert [r[0] for r in rows if r[1] == "mean"] == ["None", "MixSS"]
    assert any(r[1] == "sign_test_vs_None" for r in rows)


def test_ablation_rejects_unknown_strategy(tiny, tmp_path):
    assert main(["ablate", "--config", str(tiny), "--out", str(tmp_path), "--strategies", "Cutmix"]) == 2


def test_ablation_table_lower_is_better():
    from metamix.experiment import AblationRow

    rows = [AblationRow("None", 0, 1.0, 0.5, -0.5, 0.1), AblationRow("MetaMix", 0, 1.0, 0.4, -0.6, 0.1)]
    text = ablation_table(rows, higher_better=False)
    assert "wins=1" in text
    text = ablation_table([replace(r) for r in rows], higher_better=True)
    assert "wins=0" in text
