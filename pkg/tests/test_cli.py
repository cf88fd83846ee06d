import csv
import json

import numpy as np
import pytest

from tvt import autodiff, checkpoint, cli
from tvt.data import LabeledImageSet, write_idx
from tvt.model import TVTModel
from tvt.vit import ModelConfig

SMALL_RUN = """\
# reduced model for fast tests
image_size = 8
patch_size = 4
embed_dim = 8
heads = 2
depth = 2
classes = 3
mlp_ratio = 2
total_steps = 6
warmup_steps = 2
eval_interval = 3
train_per_domain = 30
test_per_domain = 12
batch_source = 4
batch_target = 4
"""


@pytest.fixture
def run_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_RUN)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_defaults(self):
        cfg = cli.build_config({})
        assert cfg.model == ModelConfig() and cfg.paths == {}

    def test_unknown_key_named(self, tmp_path, capsys):
        (tmp_path / "c").write_text("embed_dim = 8\nlearning_rate = 0.1\n")
        code, _, err = run(capsys, "train", "--config", tmp_path / "c", "--out", tmp_path / "o")
        assert code == 2 and "learning_rate" in err

    def test_missing_file_named(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", tmp_path / "absent.cfg", "--out", tmp_path / "o")
        assert code == 2 and "absent.cfg" in err

    @pytest.mark.parametrize(
        "text,key", [("alpha = -1", "alpha"), ("heads = x", "heads"), ("use_tam = maybe", "use_tam"), ("embed_dim = 10\nheads = 4", "heads")]
    )
    def test_invalid_values(self, tmp_path, capsys, text, key):
        (tmp_path / "c").write_text(text)
        code, _, err = run(capsys, "train", "--config", tmp_path / "c", "--out", tmp_path / "o")
        assert code == 2 and key in err

    def test_duplicate_key(self):
        with pytest.raises(cli.UsageError, match="duplicate"):
            cli.parse_config_text("alpha = 1\nalpha = 2")

    def test_resolved_round_trip(self, run_cfg):
        cfg = cli.load_config(str(run_cfg))
        again = cli.build_config(cli.parse_config_text("\n".join(cfg.resolved_lines())))
        assert again == cfg

    def test_ablation_flags(self):
        base = cli.build_config({}).train
        ns = lambda **kw: type("A", (), dict(dict(source_only=False, no_tam=False, no_dcm=False), **kw))()
        assert cli.apply_ablation_flags(base, ns(no_dcm=True)).gamma == 0
        no_tam = cli.apply_ablation_flags(base, ns(no_tam=True))
        assert not no_tam.use_tam and no_tam.beta == 0 and no_tam.alpha == base.alpha
        so = cli.apply_ablation_flags(base, ns(source_only=True))
        assert (so.alpha, so.beta, so.gamma, so.use_tam) == (0, 0, 0, False)


class TestTrain:
    def test_outputs(self, run_cfg, tmp_path, capsys):
        out = tmp_path / "o"
        code, stdout, _ = run(capsys, "train", "--config", run_cfg, "--out", out)
        assert code == 0
        assert "embed_dim = 8" in stdout
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 6
        rows = [json.loads(line) for line in lines]
        assert [r["step"] for r in rows] == list(range(1, 7))
        assert "acc" in rows[2] and "acc" not in rows[0]
        assert {p.name for p in out.iterdir()} >= {"final.ckpt", "step_0.ckpt", "step_3.ckpt", "resolved_config.txt"}

    def test_rerun_identical(self, run_cfg, tmp_path, capsys):
        for name in "ab":
            assert run(capsys, "train", "--config", run_cfg, "--out", tmp_path / name)[0] == 0
        for f in ("metrics.jsonl", "final.ckpt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_io_error(self, run_cfg, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        code, _, _ = run(capsys, "train", "--config", run_cfg, "--out", blocker / "sub")
        assert code == 3

    def test_idx_sources(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        for split in ("source_train", "target_train", "target_test"):
            ds = LabeledImageSet(rng.uniform(size=(10, 8, 8, 1)), np.arange(10) % 3)
            write_idx(ds, tmp_path / f"{split}.img", tmp_path / f"{split}.lbl")
        paths = "\n".join(f"{s}_{k} = {tmp_path / s}.{ext}" for s in ("source_train", "target_test") for k, ext in (("images", "img"), ("labels", "lbl")))
        (tmp_path / "c").write_text(SMALL_RUN + paths + f"\ntarget_train_images = {tmp_path}/target_train.img\n")
        code, stdout, _ = run(capsys, "train", "--config", tmp_path / "c", "--out", tmp_path / "o")
        assert code == 0 and "target_accuracy" in stdout

    def test_idx_missing_file(self, tmp_path, capsys):
        (tmp_path / "c").write_text(
            SMALL_RUN + f"source_train_images = {tmp_path}/nope\nsource_train_labels = {tmp_path}/nope2\ntarget_train_images = {tmp_path}/x\n"
        )
        code, _, err = run(capsys, "train", "--config", tmp_path / "c", "--out", tmp_path / "o")
        assert code == 2 and "nope" in err


class TestEval:
    def _ckpt(self, tmp_path, cfg, seed=0):
        path = tmp_path / f"m{seed}.ckpt"
        checkpoint.save(path, TVTModel(cfg, seed=seed).parameters(), cfg)
        return path

    def test_json_output(self, run_cfg, tmp_path, capsys):
        cfg = cli.load_config(str(run_cfg)).model
        code, out, _ = run(capsys, "eval", "--config", run_cfg, "--checkpoint", self._ckpt(tmp_path, cfg))
        assert code == 0
        acc = json.loads(out)["target_accuracy"]
        assert 0 <= acc <= 1

    def test_random_checkpoint_near_chance(self, tmp_path, capsys):
        # default 4-class corpus
        (tmp_path / "c").write_text("embed_dim = 16\nheads = 2\ndepth = 2\ntrain_per_domain = 4\ntest_per_domain = 400\n")
        cfg = cli.load_config(str(tmp_path / "c")).model
        accs = []
        for seed in range(5):
            code, out, _ = run(capsys, "eval", "--config", tmp_path / "c", "--checkpoint", self._ckpt(tmp_path, cfg, seed))
            accs.append(json.loads(out)["target_accuracy"])
        assert abs(np.mean(accs) - 0.25) <= 0.05

    def test_shape_mismatch(self, run_cfg, tmp_path, capsys):
        other = ModelConfig(image_size=8, patch_size=4, embed_dim=16, heads=2, depth=2, classes=3, mlp_ratio=2)
        code, _, err = run(capsys, "eval", "--config", run_cfg, "--checkpoint", self._ckpt(tmp_path, other))
        assert code == 2 and "embed_dim" in err

    def test_bad_magic(self, run_cfg, tmp_path, capsys):
        (tmp_path / "junk.ckpt").write_bytes(b"NOTACKPT" + bytes(32))
        code, _, err = run(capsys, "eval", "--config", run_cfg, "--checkpoint", tmp_path / "junk.ckpt")
        assert code == 2 and "magic" in err


class TestGradcheck:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        rep = json.loads(out)
        assert code == 0 and rep["pass"] and rep["coordinates"] >= 200
        assert rep["max_rel_error"] <= 1e-4
        assert rep["worst_param"] in TVTModel(cli.GRADCHECK_MODEL).parameters()

    def test_corrupted_backward_rule_fails(self, capsys, monkeypatch):
        good = autodiff._gelu_grad
        monkeypatch.setattr(autodiff, "_gelu_grad", lambda *a, **k: tuple(1.05 * x for x in good(*a, **k)))
        code, out, _ = run(capsys, "gradcheck")
        assert code == 1 and not json.loads(out)["pass"]

    def test_too_few_samples(self, capsys):
        assert run(capsys, "gradcheck", "--samples", "50")[0] == 2


class TestAttnDump:
    def test_contract(self, tmp_path, capsys):
        cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, heads=2, depth=2, classes=3, mlp_ratio=2)
        model = TVTModel(cfg, seed=0)
        rng = np.random.default_rng(1)
        for p in model.parameters().values():
            p.values = p.values + 0.3 * rng.normal(size=p.shape)
        checkpoint.save(tmp_path / "m.ckpt", model.parameters(), cfg)
        write_idx(LabeledImageSet(rng.uniform(size=(7, 8, 8, 1)), np.zeros(7)), tmp_path / "x.idx", tmp_path / "y.idx")
        code, _, _ = run(capsys, "attn-dump", "--checkpoint", tmp_path / "m.ckpt", "--images", tmp_path / "x.idx", "--out", tmp_path / "a.csv")
        assert code == 0
        r = cfg.num_patches
        rows = list(csv.reader(open(tmp_path / "a.csv")))[1:]
        feats = list(csv.reader(open(tmp_path / "a_features.csv")))[1:]
        assert len(rows) == len(feats) == 7
        for row, frow in zip(rows, feats):
            assert len(row) == 1 + 3 * r
            v = np.array(row[1:], dtype=float)
            raw, t, eff = v[:r], v[r : 2 * r], v[2 * r :]
            assert np.all((t >= 0) & (t <= 1))
            assert np.all(eff <= raw)
            assert abs(raw.sum() + float(frow[1]) - 1) <= 1e-9
            assert len(frow) == 2 + cfg.embed_dim

    def test_missing_images(self, tmp_path, capsys):
        cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, heads=2, depth=2, classes=3, mlp_ratio=2)
        checkpoint.save(tmp_path / "m.ckpt", TVTModel(cfg).parameters(), cfg)
        code, _, err = run(capsys, "attn-dump", "--checkpoint", tmp_path / "m.ckpt", "--images", tmp_path / "no.idx", "--out", tmp_path / "a.csv")
        assert code == 2 and "no.idx" in err


def test_no_command(capsys):
    assert run(capsys)[0] == 2
