import json
import struct

import numpy as np
import pytest
import torch

from wam import toyworld as tw
from wam.diffcore import Rng, sample_normal
from wam.flowmatch import WindowDataset, fit
from wam.harness import cli
from wam.harness.ablations import action_leakage, to_csv
from wam.harness.config import RunConfig, format_config, load_config, parse_config
from wam.harness.evaluate import run_eval
from wam.harness.formats import (
    FormatError, dataset_size, iter_dataset, load_checkpoint, read_dataset, save_checkpoint, write_dataset,
)
from wam.harness.runs import demo_seed, generate_dataset, train
from wam.inference import ExpertPolicy, ModelPolicy, RandomPolicy
from wam.model import ModelConfig, WorldActionModel

TINY = "d_model = 16\nheads = 2\nlayers = 1\nimage_h = 8\nimage_w = 8\n"


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# tiny run\n" + TINY + "n_demos = 6\nsteps = 12\nbatch_size = 4\neval_episodes = 4\n"
        "max_episode_steps = 20\nlr_init = 1e-3\ndataset = d.wamd  # relative\ncheckpoint = m.wamc\nmetrics = out/m\n"
    )
    (tmp_path / "out").mkdir()
    return path


def test_config_parse_and_paths(cfg_file, tmp_path):
    cfg = load_config(cfg_file)
    assert cfg.model.d_model == 16 and cfg.steps == 12 and cfg.lr_init == 1e-3
    assert cfg.dataset == tmp_path / "d.wamd"
    assert cfg.execute_horizon == 4
    again = parse_config(format_config(cfg))
    assert again == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config("d_modle = 3\n")
    with pytest.raises(ValueError, match="cannot parse"):
        parse_config("steps = many\n")
    with pytest.raises(ValueError, match="duplicate"):
        parse_config("seed = 1\nseed = 2\n")
    with pytest.raises(ValueError, match="expected"):
        parse_config("just words\n")
    with pytest.raises(ValueError):
        parse_config("mode = dance\n")
    p = tmp_path / "c.cfg"
    p.write_text("dataset = missing/dir/d.wamd\n")
    with pytest.raises(ValueError, match="does not exist"):
        load_config(p)
    assert parse_config("action_self_attention = false\n").model.action_self_attention is False


def test_defaults_match_protocol():
    c = RunConfig()
    assert (c.lr_init, c.lr_final, c.eval_episodes) == (1e-4, 1e-6, 20)
    assert c.model.lambda_action == 5.0 and c.model.lambda_video == 1.0


@pytest.fixture(scope="module")
def demos():
    return [tw.generate_demo(s, h=8, w=8) for s in range(5)]


def test_dataset_roundtrip(tmp_path, demos):
    path = tmp_path / "d.wamd"
    size = write_dataset(demos, path)
    assert size == path.stat().st_size == dataset_size(demos)
    back = read_dataset(path)
    for a, b in zip(demos, back):
        assert a.instruction == b.instruction and a.success == b.success
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.states, b.states)
        assert np.array_equal(a.actions, b.actions)


def test_dataset_header_layout(tmp_path, demos):
    path = tmp_path / "d.wamd"
    write_dataset(demos, path)
    raw = path.read_bytes()
    assert raw[:4] == bytes([0x57, 0x41, 0x4D, 0x44])
    assert struct.unpack_from("<II7H", raw, 4) == (1, len(demos), 3, 8, 8, 3, 5, 3, len(tw.WORDS))


def test_dataset_streaming(tmp_path, demos):
    path = tmp_path / "d.wamd"
    write_dataset(demos, path)
    it = iter_dataset(path)
    first = next(it)
    assert np.array_equal(first.frames, demos[0].frames)


def test_dataset_errors(tmp_path, demos):
    path = tmp_path / "d.wamd"
    write_dataset(demos, path)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.wamd"
    bad.write_bytes(b"XAMD" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        read_dataset(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        read_dataset(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        read_dataset(bad)


def test_dataset_size_formula_200_trajectories():
    demos = [tw.generate_demo(s) for s in range(200)]
    vocab = sum(2 + len(w) for w in tw.WORDS)
    expected = 4 + 4 + 4 + 7 * 2 + vocab
    for d in demos:
        expected += 4 + 1 + 2 + 2 * 5 + 4 * d.length * (3 * 16 * 16 * 3 + 5 + 3)
    assert dataset_size(demos) == expected


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(d_model=16, heads=2, layers=1, image_h=8, image_w=8)
    m = WorldActionModel(cfg, seed=3)
    rng = Rng(0)
    with torch.no_grad():
        for p in m.params.values():
            p.add_(sample_normal(rng, p.shape, p.dtype) * 0.1)
    path = tmp_path / "m.wamc"
    save_checkpoint(m.params, cfg, 42, path)
    params, cfg2, step, opt = load_checkpoint(path, expect=cfg)
    assert cfg2 == cfg and step == 42 and opt is None
    assert all(torch.equal(params[k], m.params[k]) for k in params)
    assert path.read_bytes()[:4] == b"WAMC"
    from wam.inference import decode_actions, make_context

    s = tw.reset(Rng(1), 0)
    ctx = make_context(m, tw.render_views(s, 8, 8)[None], s.vector()[None], [tw.instruction_tokens(0)])
    m2 = WorldActionModel(cfg2, params)
    assert torch.equal(decode_actions(m, ctx, [Rng(2)]), decode_actions(m2, ctx, [Rng(2)]))


def test_checkpoint_mismatch_errors(tmp_path):
    cfg = ModelConfig(d_model=16, heads=2, layers=1, image_h=8, image_w=8)
    path = tmp_path / "m.wamc"
    save_checkpoint(WorldActionModel(cfg).params, cfg, 0, path)
    with pytest.raises(ValueError, match="differs"):
        load_checkpoint(path, expect=ModelConfig())
    with pytest.raises(ValueError):
        save_checkpoint(WorldActionModel(cfg).params, ModelConfig(), 0, path)
    raw = path.read_bytes()
    (tmp_path / "x.wamc").write_bytes(b"WAMD" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_checkpoint(tmp_path / "x.wamc")


def test_resume_from_checkpoint_continues_trace(tmp_path, demos):
    cfg = parse_config(TINY + "steps = 8\nbatch_size = 4\nlr_init = 1e-3\n")
    _, _, full = train(cfg, demos)
    ck = tmp_path / "half.wamc"
    _, _, first = train(cfg, demos, steps=4, checkpoint_path=ck)
    _, _, rest = train(cfg, demos, resume=ck)
    assert [r["L_all"] for r in full] == [r["L_all"] for r in first + rest]


def test_generate_dataset_seeds():
    cfg = parse_config(TINY + "seed = 3\n")
    a = generate_dataset(cfg, 2)
    assert a[1].frames.tobytes() == tw.generate_demo(demo_seed(3, 1), h=8, w=8).frames.tobytes()
    assert demo_seed(3, 1) != demo_seed(4, 1)


def test_run_eval_outputs(tmp_path):
    cfg = parse_config(TINY + "eval_episodes = 6\n")
    out = tmp_path / "ev"
    m1 = run_eval(ExpertPolicy(8), cfg, out)
    assert m1["SR"] >= 0.95 and m1["episodes"] == 6
    assert json.loads((tmp_path / "ev.json").read_text()) == m1
    assert len((tmp_path / "ev.csv").read_text().splitlines()) == 7
    assert run_eval(ExpertPolicy(8), cfg) == m1


def test_untrained_model_is_no_better_than_random():
    cfg = parse_config(TINY + "eval_episodes = 10\nmax_episode_steps = 60\n")
    untrained = run_eval(ModelPolicy(WorldActionModel(cfg.model, seed=0)), cfg)
    rand = run_eval(RandomPolicy(8), cfg)
    assert untrained["SR"] <= rand["SR"] + 0.05


def test_leakage_probe():
    causal = WorldActionModel(ModelConfig(d_model=16, heads=2, layers=1, image_h=8, image_w=8), seed=0)
    assert action_leakage(causal, 0) == 0.0


def test_csv_table():
    text = to_csv([{"delta": 4, "SR": 0.5}], ["delta", "SR"])
    assert text == "delta,SR\n4,0.5000\n"


def test_cli_end_to_end(cfg_file, tmp_path, capsys):
    assert cli.main(["gen-data", "--config", str(cfg_file)]) == 0
    assert "wrote 6 trajectories" in capsys.readouterr().out
    assert (tmp_path / "d.wamd").exists()
    assert cli.main(["pretrain", "--config", str(cfg_file), "--steps", "5", "--out", str(tmp_path / "pre.wamc")]) == 0
    assert cli.main(["train", "--config", str(cfg_file), "--init", str(tmp_path / "pre.wamc")]) == 0
    out = capsys.readouterr().out
    assert "pretrain-video" in out and "checkpoint step 12" in out
    assert (tmp_path / "out" / "m.joint.jsonl").exists()
    assert cli.main(["eval", "--config", str(cfg_file), "--n", "2"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["episodes"] == 2
    assert cli.main(["rollout", "--config", str(cfg_file), "--policy", "expert", "--out", str(tmp_path / "frames")]) == 0
    assert list((tmp_path / "frames").glob("*.ppm"))
    assert cli.main(["bench", "--config", str(cfg_file), "--reps", "2"]) == 0
    assert "joint_tokens" in capsys.readouterr().out


def test_cli_inspect_mask(capsys):
    assert cli.main(["inspect-mask", "--p", "8", "--delta", "4"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "n_f=96" in out[0]
    assert out[4].split() == ["action", "allow", "allow", "allow", "-"]


def test_cli_ablate_mask(cfg_file, capsys):
    assert cli.main(["ablate-mask", "--config", str(cfg_file)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("mask_mode,max_action_change,isolated")
    causal, full = lines[1].split(","), lines[2].split(",")
    assert causal[0] == "causal" and causal[2] == "True"
    assert full[0] == "full" and full[2] == "False"


def test_cli_ablate_delta(cfg_file, tmp_path, capsys):
    assert cli.main(["gen-data", "--config", str(cfg_file), "--n", "4"]) == 0
    out = tmp_path / "delta.csv"
    assert cli.main(["ablate-delta", "--config", str(cfg_file), "--deltas", "0,4", "--steps", "3", "--out", str(out)]) == 0
    rows = out.read_text().strip().splitlines()
    assert rows[0].startswith("delta,K,n_f,SR")
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "4"]


def test_cli_errors(tmp_path, capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--config", "x", "--bogus"])
    with pytest.raises(SystemExit):
        cli.main(["train"])
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["train", "--config", str(bad)]) == 1
    assert "unknown config key" in capsys.readouterr().err
    ok = tmp_path / "ok.cfg"
    ok.write_text(TINY + "dataset = nothing.wamd\n")
    assert cli.main(["train", "--config", str(ok)]) == 1


def test_campaign_cache_key(tmp_path):
    from wam.harness.campaign import campaign_key, load_campaign, save_campaign

    a = parse_config(TINY + "dataset = a.wamd\n")
    moved = parse_config(TINY + "dataset = b.wamd\n", base=tmp_path)
    assert campaign_key(a, (0, 4)) == campaign_key(moved, (0, 4))
    assert campaign_key(a, (0, 4)) != campaign_key(a, (0, 2))
    assert campaign_key(a, (0, 4)) != campaign_key(a.with_model(delta=2), (0, 4))
    path = tmp_path / "r" / "c.json"
    assert load_campaign(path, a, (0, 4)) is None
    save_campaign(path, {"key": campaign_key(a, (0, 4)), "rows": []})
    assert load_campaign(path, a, (0, 4)) == {"key": campaign_key(a, (0, 4)), "rows": []}
    assert load_campaign(path, a.with_model(delta=2), (0, 4)) is None
