"""Data plumbing, optimizer, schedule, training loop, reporting, CLI."""

import numpy as np
import pytest

import gft.harness.cli as cli
import gft.harness.data as gd
import gft.harness.reporting as gr
import gft.harness.training as gt
import gft.heads as gh
import gft.model as gm
import gft.numcore as nc
from gft.pointops import PointCloud


def toy_model_cfg(**overrides):
    base = dict(embed_dim=16, num_layers=3, num_heads=2, mlp_ratio=2,
                tokenizer_hidden=8, num_patches=8, patch_size=4,
                prompt_length=3, xattn_dim=8, xattn_heads=2,
                edgeconv=gm.EdgeConvConfig(k_graph=3, dims=(8,), ffn_dim=16,
                                           out_dim=12),
                interaction_layers=(2,), num_classes=4)
    base.update(overrides)
    return gm.GftModelConfig(**base)


# -- cloud files ------------------------------------------------------------

def test_cloud_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(17, 3)),
                       point_labels=rng.integers(0, 3, 17))
    path = tmp_path / "c.xyzl"
    gd.save_cloud(path, cloud)
    back = gd.load_cloud(path)
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-6)
    np.testing.assert_array_equal(back.point_labels, cloud.point_labels)
    assert path.read_text().splitlines()[0] == "XYZL 1 17 1"


def test_cloud_without_labels(tmp_path):
    cloud = PointCloud(np.zeros((3, 3)))
    gd.save_cloud(tmp_path / "c.xyzl", cloud)
    back = gd.load_cloud(tmp_path / "c.xyzl")
    assert back.point_labels is None


@pytest.mark.parametrize("text,fragment", [
    ("", "empty"),
    ("PQRS 1 1 0\n0 0 0\n", "header"),
    ("XYZL 2 1 0\n0 0 0\n", "version"),
    ("XYZL 1 5 0\n0 0 0\n", "points"),
    ("XYZL 1 1 0\n0 0\n", "line 2"),
    ("XYZL 1 1 1\n0 0 0\n", "line 2"),
    ("XYZL 1 1 0\n0 0 zebra\n", "line 2"),
])
def test_cloud_format_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.xyzl"
    path.write_text(text)
    with pytest.raises(gd.CloudFormatError) as err:
        gd.load_cloud(path)
    assert fragment in str(err.value)


# -- manifests ---------------------------------------------------------------

def test_manifest_round_trip_and_split(tmp_path):
    man = gd.DatasetManifest(root=tmp_path, task="classification")
    man.entries = [gd.ManifestEntry("a.xyzl", 0, "train"),
                   gd.ManifestEntry("b.xyzl", 1, "test")]
    for entry in man.entries:
        gd.save_cloud(tmp_path / entry.path, PointCloud(np.zeros((2, 3))))
    path = gd.save_manifest(man)
    back = gd.load_manifest(path)
    assert back.task == "classification"
    assert [e.path for e in back.split("train")] == ["a.xyzl"]
    assert back.num_classes == 2
    assert back.resolve(back.entries[1]) == tmp_path / "b.xyzl"


def test_manifest_rejects_sparse_labels(tmp_path):
    man = gd.DatasetManifest(root=tmp_path)
    man.entries = [gd.ManifestEntry("a.xyzl", 0, "train"),
                   gd.ManifestEntry("b.xyzl", 2, "train")]
    with pytest.raises(gd.CloudFormatError):
        man.num_classes


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("file,grade\nx,1\n")
    with pytest.raises(gd.CloudFormatError):
        gd.load_manifest(path)


# -- synthetic data ----------------------------------------------------------

def test_synth_dataset_is_deterministic(tmp_path):
    man_a = gd.synth_dataset("classification4", tmp_path / "a", 4, 2,
                             n_points=64, seed=5)
    gd.synth_dataset("classification4", tmp_path / "b", 4, 2,
                     n_points=64, seed=5)
    for entry in man_a.entries:
        assert ((tmp_path / "a" / entry.path).read_bytes()
                == (tmp_path / "b" / entry.path).read_bytes())


def test_synth_classification_balances_classes(tmp_path):
    man = gd.synth_dataset("classification4", tmp_path, 8, 4, n_points=64,
                           seed=1)
    train_labels = [e.label for e in man.split("train")]
    assert sorted(train_labels) == [0, 0, 1, 1, 2, 2, 3, 3]
    assert man.num_classes == 4


def test_sphere_instances_stay_within_noise_bound():
    rng = np.random.default_rng(7)
    sigma = 0.05
    for _ in range(10):
        cloud = gd.make_instance("classification4", 0, 128, sigma, rng)
        centered = cloud.points - cloud.points.mean(axis=0)
        radii = np.linalg.norm(centered, axis=1)
        # noisy unit sphere at scale <= 1.3: radius*(1 + 4*sigma) bound
        assert radii.max() <= 1.3 * (1 + 4 * sigma)


def test_parts3_labels_cover_all_parts(tmp_path):
    man = gd.synth_dataset("parts3", tmp_path, 3, 2, n_points=64, seed=2)
    assert man.task == "segmentation"
    for entry in man.entries:
        cloud = man.load(entry)
        assert set(np.unique(cloud.point_labels)) == {0, 1, 2}


def test_rotation_modes():
    rng = np.random.default_rng(8)
    for _ in range(5):
        rz = gd._random_rotation(rng, "z")
        np.testing.assert_allclose(rz @ [0.0, 0.0, 1.0], [0.0, 0.0, 1.0],
                                   atol=1e-15)
        r3 = gd._random_rotation(rng, "so3")
        np.testing.assert_allclose(r3 @ r3.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r3) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        gd._random_rotation(rng, "tilt")


def test_synth_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        gd.synth_dataset("classification4", tmp_path, 2, 1, n_points=32)
    with pytest.raises(ValueError):
        gd.synth_dataset("spheres9", tmp_path, 2, 1, n_points=64)


# -- few-shot ----------------------------------------------------------------

def test_few_shot_episode_shape(tmp_path):
    man = gd.synth_dataset("classification4", tmp_path, 16, 8, n_points=64,
                           seed=3)
    task = gd.sample_few_shot(man, n_way=2, k_shot=3, seed=4)
    assert len(task.train_entries) == 6
    assert sorted(task.label_map.values()) == [0, 1]
    test_labels = {e.label for e in task.test_entries}
    assert test_labels == set(task.class_ids)
    again = gd.sample_few_shot(man, n_way=2, k_shot=3, seed=4)
    assert [e.path for e in again.train_entries] == \
        [e.path for e in task.train_entries]


def test_few_shot_insufficient_instances(tmp_path):
    man = gd.synth_dataset("classification4", tmp_path, 8, 4, n_points=64,
                           seed=5)
    with pytest.raises(ValueError):
        gd.sample_few_shot(man, n_way=3, k_shot=5, seed=0)
    seg = gd.synth_dataset("parts3", tmp_path / "seg", 4, 2, n_points=64)
    with pytest.raises(ValueError):
        gd.sample_few_shot(seg, n_way=2, k_shot=1, seed=0)


# -- optimizer and schedule ---------------------------------------------------

def test_adamw_single_step_closed_form():
    cfg = gt.TrainConfig(lr=0.1, weight_decay=0.5, epochs=2, warmup_epochs=0)
    p = nc.param("w", np.array([2.0]))
    opt = gt.AdamW([p], cfg)
    g = np.array([0.3])
    opt.step({p.tensor: g}, lr=0.1)
    m_hat = g  # m/(1-beta1) after one step
    v_hat = g * g
    want = 2.0 - 0.1 * 0.5 * 2.0 - 0.1 * m_hat / (np.sqrt(v_hat) + cfg.eps)
    np.testing.assert_allclose(p.tensor.values, want, rtol=1e-12)


def test_adamw_skips_frozen_and_missing_grads():
    cfg = gt.TrainConfig(epochs=2, warmup_epochs=0)
    frozen = nc.param("f", np.array([1.0]), frozen=True)
    idle = nc.param("i", np.array([1.0]))
    opt = gt.AdamW([frozen, idle], cfg)
    assert "f" not in opt.state and "i" in opt.state
    opt.step({}, lr=0.1)
    np.testing.assert_array_equal(frozen.tensor.values, [1.0])
    np.testing.assert_array_equal(idle.tensor.values, [1.0])


def test_adamw_decay_displaces_even_with_zero_gradient():
    cfg = gt.TrainConfig(lr=0.1, weight_decay=0.5, epochs=2, warmup_epochs=0)
    p = nc.param("w", np.array([4.0]))
    opt = gt.AdamW([p], cfg)
    opt.step({p.tensor: np.array([0.0])}, lr=0.1)
    np.testing.assert_allclose(p.tensor.values, [4.0 * (1 - 0.1 * 0.5)])


def test_cosine_schedule_shape():
    cfg = gt.TrainConfig(lr=5e-4, warmup_lr=1e-6, min_lr=1e-6,
                         warmup_epochs=10, epochs=300)
    values = [gt.cosine_schedule(e, cfg) for e in range(301)]
    assert values[0] == pytest.approx(1e-6, abs=1e-12)
    assert values[10] == pytest.approx(5e-4, abs=1e-12)
    assert values[300] == pytest.approx(1e-6, abs=1e-12)
    ramp = np.diff(values[:11])
    assert (ramp > 0).all() and np.allclose(ramp, ramp[0])
    decay = np.diff(values[10:])
    assert (decay <= 0).all()
    with pytest.raises(ValueError):
        gt.cosine_schedule(-1, cfg)
    with pytest.raises(ValueError):
        gt.cosine_schedule(301, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        gt.TrainConfig(warmup_epochs=5, epochs=5)
    with pytest.raises(ValueError):
        gt.TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        gt.TrainConfig(task="detection")


# -- training loop -----------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return gd.synth_dataset("classification4", root, 8, 4, n_points=64,
                            seed=0)


def quick_cfg(**overrides):
    base = dict(task="classification", lr=1e-3, warmup_epochs=1, epochs=2,
                batch_size=4, seed=0)
    base.update(overrides)
    return gt.TrainConfig(**base)


def build_pair(seed=0):
    model = gm.init_model(toy_model_cfg(), seed=seed)
    head = gh.init_classifier(np.random.default_rng(seed + 1), 16, 4,
                              hidden=8, dropout=0.5)
    return model, head


def test_train_is_deterministic(small_dataset):
    rows = []
    for _ in range(2):
        model, head = build_pair()
        res = gt.train(model, head, small_dataset, quick_cfg())
        rows.append([(r.lr, r.train_loss, r.eval_metric) for r in res.rows])
    assert rows[0] == rows[1]


def test_train_writes_outputs_and_eval_reloads(tmp_path, small_dataset):
    model, head = build_pair()
    res = gt.train(model, head, small_dataset, quick_cfg(),
                   out_dir=tmp_path / "run")
    assert res.checkpoint_path.exists()
    assert len(res.rows) == 2
    metrics, _ = gt.evaluate(model, head, small_dataset)
    fresh_model, fresh_head = build_pair(seed=9)
    from gft.backbone import load_checkpoint
    load_checkpoint(res.checkpoint_path,
                    fresh_model.parameters() + fresh_head.parameters())
    best = max(r.eval_metric for r in res.rows)
    reload_metrics, _ = gt.evaluate(fresh_model, fresh_head, small_dataset)
    assert reload_metrics.overall_accuracy == pytest.approx(best)


def test_train_rejects_empty_split(small_dataset):
    model, head = build_pair()
    with pytest.raises(ValueError):
        gt.train(model, head, small_dataset, quick_cfg(), train_entries=[])
    with pytest.raises(ValueError):
        gt.evaluate(model, head, small_dataset, split="val")


def test_freeze_sidecar_leaves_no_trainable_model_params():
    model, _ = build_pair()
    gt.freeze_sidecar(model)
    assert all(p.frozen for p in model.parameters())


def test_toy_setup_is_consistent():
    model_cfg, train_cfg, head_kwargs = gt.toy_setup()
    assert train_cfg.epochs <= 50
    assert train_cfg.task == "classification"
    assert model_cfg.num_classes == 4
    assert set(head_kwargs) == {"hidden", "dropout"}
    gm.init_model(model_cfg, seed=0)  # constructible


# -- reporting ----------------------------------------------------------------

def test_metrics_csv_and_curves(tmp_path):
    rows = [gt.EpochRow(0, 1e-6, 1.5, 0.25), gt.EpochRow(1, 1e-3, 0.9, 0.5)]
    csv_path = gr.write_metrics_csv(rows, tmp_path / "m.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,eval_metric"
    assert lines[1].startswith("0,1.00000000e-06,1.500000,0.250000")
    png = gr.plot_training_curves(rows, tmp_path / "c.png")
    assert png.stat().st_size > 0


def test_attention_report_masses(tmp_path):
    cfg = toy_model_cfg()
    model = gm.init_model(cfg, seed=3)
    cloud = PointCloud(np.random.default_rng(4).normal(size=(48, 3)))
    path = gr.attention_report(cloud, model, layer=2, out_csv=tmp_path / "a.csv",
                               out_png=tmp_path / "a.png")
    lines = path.read_text().splitlines()
    assert lines[0] == "center_x,center_y,center_z,weight"
    weights = [float(l.split(",")[3]) for l in lines[1:-1]]
    assert len(weights) == cfg.num_patches
    footer = lines[-1]
    assert footer.startswith("#") and "off_patch_mass=" in footer
    off = float(footer.split("off_patch_mass=")[1])
    assert sum(weights) + off == pytest.approx(1.0, abs=1e-9)
    assert (tmp_path / "a.png").stat().st_size > 0


def test_attention_report_reverse_direction(tmp_path):
    cfg = toy_model_cfg()
    model = gm.init_model(cfg, seed=5)
    cloud = PointCloud(np.random.default_rng(6).normal(size=(48, 3)))
    path = gr.attention_report(cloud, model, layer=1, out_csv=tmp_path / "b.csv",
                               direction="patch_to_cls")
    lines = path.read_text().splitlines()
    assert len(lines) == cfg.num_patches + 2
    with pytest.raises(ValueError):
        gr.attention_report(cloud, model, 1, tmp_path / "c.csv",
                            direction="sideways")


def test_param_report_lines():
    ledger = gm.count_trainable_params([
        nc.param("a", np.zeros((2, 2))), nc.param("b", np.zeros(3), frozen=True)])
    lines = gr.param_report_lines(ledger, detail=True)
    assert lines[0] == "a,4,trainable"
    assert lines[1] == "b,3,frozen"
    assert lines[-1] == "trainable 4 / total 7 (57.14%)"


# -- CLI ----------------------------------------------------------------------

def test_parse_config_file(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("learning_rate = 0.002  # peak\n\n"
                    "interaction_layers=1,3\nprompt_length=5\n")
    got = cli.parse_config_file(path)
    assert got == {"learning_rate": 0.002, "interaction_layers": (1, 3),
                   "prompt_length": 5}
    path.write_text("cheese=brie\n")
    with pytest.raises(ValueError):
        cli.parse_config_file(path)
    path.write_text("just a line\n")
    with pytest.raises(ValueError):
        cli.parse_config_file(path)


def test_cli_settings_precedence(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("learning_rate=0.01\nprompt_length=7\nedgeconv_knn=11\n")
    parser = cli.build_parser()
    args = parser.parse_args([
        "count-params", "--preset", "toy", "--config", str(path),
        "--learning-rate", "0.5"])
    model_cfg, train_cfg, _ = cli.resolve_settings(args, num_classes=4)
    assert train_cfg.lr == 0.5              # flag beats file
    assert model_cfg.prompt_length == 7     # file beats preset
    assert model_cfg.edgeconv.k_graph == 11
    assert model_cfg.embed_dim == 96        # preset baseline survives


def test_cli_synth_and_count_params(tmp_path, capsys):
    out = tmp_path / "ds"
    rc = cli.main(["synth", "--kind", "classification4", "--out", str(out),
                   "--n-train", "4", "--n-test", "2", "--num-points", "64",
                   "--seed", "1"])
    assert rc == 0
    assert (out / "manifest.csv").exists()
    assert len(list(out.glob("*.xyzl"))) == 6
    rc = cli.main(["count-params", "--preset", "toy", "--num-classes", "4"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "trainable " in text and text.strip().endswith("%)")


def test_cli_estimate_flops(capsys):
    rc = cli.main(["estimate-flops", "--preset", "toy", "--num-classes", "4",
                   "--num-points", "512"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "n=512" in out and "G)" in out


def test_cli_train_eval_attention_round_trip(tmp_path, capsys):
    data = tmp_path / "ds"
    cli.main(["synth", "--kind", "classification4", "--out", str(data),
              "--n-train", "4", "--n-test", "2", "--num-points", "64"])
    run = tmp_path / "run"
    flags = ["--preset", "toy", "--num-patches", "8", "--patch-size", "4",
             "--prompt-length", "2", "--edgeconv-knn", "3",
             "--embed-dim", "32", "--num-layers", "2", "--num-heads", "2",
             "--tokenizer-hidden", "8", "--xattn-dim", "8",
             "--interaction-layers", "1", "--head-hidden", "8"]
    rc = cli.main(["train", "--data", str(data / "manifest.csv"), "--out",
                   str(run), "--epochs", "2", "--warmup-epochs", "1",
                   "--batch-size", "2"] + flags)
    assert rc == 0
    assert (run / "metrics.csv").exists() and (run / "curves.png").exists()
    rc = cli.main(["eval", "--data", str(data / "manifest.csv"),
                   "--checkpoint", str(run / "best.ckpt")] + flags)
    assert rc == 0
    assert "overall_accuracy" in capsys.readouterr().out
    rc = cli.main(["export-attention", "--cloud", str(data / "test_00000.xyzl"),
                   "--out-csv", str(tmp_path / "att.csv"), "--num-classes", "4",
                   "--checkpoint", str(run / "best.ckpt")] + flags)
    assert rc == 0
    assert (tmp_path / "att.csv").read_text().startswith("center_x")
