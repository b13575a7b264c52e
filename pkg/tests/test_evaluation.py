import numpy as np
import pytest

from app.core.exceptions import ConfigError, ShapeError
from app.engine.optim import AdamState
from app.models.baseline import init_baseline_params
from app.models.episode import collate
from app.models.neuralizer import forward, init_params
from app.schemas.checkpoint import CheckpointMeta
from app.schemas.evaluate import CSV_COLUMNS, EvalReport, EvalRow
from app.schemas.sampler import Holdout, SamplerConfig, TaskKind
from app.services.evaluation import (
    BASELINE_ID,
    GAP_ID,
    bootstrap_context,
    eval_curves,
    holdout_compare,
    holdout_episodes_config,
    infer,
    infer_bootstrap,
    is_held_out,
    relative_scores,
    truncate,
    write_report,
)
from app.services.sampler import HOLE_CHANNEL, build_episode
from app.services.trainer import task_instance
from app.storage.checkpoint import Checkpoint
from app.utils.images import montage, write_pgm


def _neuralizer(cfg, seed=0, holdout=()):
    meta = CheckpointMeta(model_kind="neuralizer", model=cfg.model, holdout=[Holdout.parse(h) for h in holdout])
    return Checkpoint(meta=meta, params=init_params(cfg.model, seed=seed), adam=AdamState())


def _baseline(cfg, task, n_subjects, replicate=0):
    meta = CheckpointMeta(
        model_kind="baseline",
        baseline=cfg.baseline,
        baseline_task=task,
        baseline_subjects=n_subjects,
        replicate=replicate,
        task_recipe=task_instance(task, cfg).to_dict(),
    )
    return Checkpoint(meta=meta, params=init_baseline_params(cfg.baseline, seed=replicate), adam=AdamState())


def _inputs(rng, n=3, b=2):
    x = rng.uniform(0, 1, size=(b, 3, 16, 16)).astype(np.float32)
    ctx = rng.uniform(0, 1, size=(n, b, 4, 16, 16)).astype(np.float32)
    ctx[:, :, 3] = ctx[:, :, 3] > 0.5
    return x, ctx


def test_infer_matches_forward(smoke_config, rng):
    ckpt = _neuralizer(smoke_config)
    x, ctx = _inputs(rng)
    result = infer(x, ctx, ckpt.params)
    np.testing.assert_array_equal(result.prediction, forward(x, ctx, ckpt.params).numpy())
    assert result.mask is None


def test_infer_thresholds_masks(smoke_config, rng):
    ckpt = _neuralizer(smoke_config)
    x, ctx = _inputs(rng)
    result = infer(x, ctx, ckpt.params, "dice")
    np.testing.assert_array_equal(result.mask, (result.logits > 0).astype(np.uint8))
    assert result.prediction.min() >= 0.0 and result.prediction.max() <= 1.0


def test_infer_rejects_empty_context(smoke_config, rng):
    x, ctx = _inputs(rng)
    with pytest.raises(ShapeError):
        infer(x, ctx[:0], _neuralizer(smoke_config).params)


@pytest.mark.parametrize("loss_kind", ["mse", "dice"])
def test_single_unperturbed_bootstrap_equals_plain_inference(smoke_config, rng, loss_kind):
    ckpt = _neuralizer(smoke_config)
    x, ctx = _inputs(rng)
    boot = infer_bootstrap(x, ctx, ckpt.params, 1, np.random.default_rng(0), loss_kind, resample=False, jitter=False)
    plain = infer(x, ctx, ckpt.params, loss_kind)
    np.testing.assert_allclose(boot.prediction, plain.prediction, rtol=0, atol=1e-7)


def test_bootstrap_needs_a_replicate(smoke_config, rng):
    x, ctx = _inputs(rng)
    with pytest.raises(ShapeError):
        infer_bootstrap(x, ctx, _neuralizer(smoke_config).params, 0, np.random.default_rng(0))


def test_bootstrap_is_deterministic(smoke_config, rng):
    ckpt = _neuralizer(smoke_config)
    x, ctx = _inputs(rng)
    a = infer_bootstrap(x, ctx, ckpt.params, 3, np.random.default_rng(5), "dice")
    b = infer_bootstrap(x, ctx, ckpt.params, 3, np.random.default_rng(5), "dice")
    np.testing.assert_array_equal(a.prediction, b.prediction)
    np.testing.assert_array_equal(a.mask, (a.prediction > 0.5).astype(np.uint8))


def test_resampled_context_draws_from_original_pairs(rng):
    _, ctx = _inputs(rng, n=4)
    out = bootstrap_context(ctx, np.random.default_rng(1), "dice", resample=True, jitter=False)
    assert out.shape == ctx.shape
    for j in range(ctx.shape[1]):
        for pair in out[:, j]:
            assert any(np.array_equal(pair, original) for original in ctx[:, j])


def test_jittered_mask_targets_stay_binary(rng):
    _, ctx = _inputs(rng)
    out = bootstrap_context(ctx, np.random.default_rng(2), "dice", resample=False, jitter=True)
    assert np.isin(out[:, :, 3], (0, 1)).all()


def test_jittered_hole_masks_stay_binary(phantom_pool, sampler_config):
    ep = build_episode(TaskKind.INPAINTING, phantom_pool, sampler_config, np.random.default_rng(3), context_size=3)
    _, ctx, _ = collate([ep])
    out = bootstrap_context(ctx, np.random.default_rng(4), "mse", resample=False, jitter=True, mask_channel=HOLE_CHANNEL)
    holes = out[:, :, HOLE_CHANNEL]
    assert np.isin(holes, (0, 1)).all()
    assert not out[:, :, 0][holes == 1].any()


def test_truncated_episodes_are_nested(phantom_pool, sampler_config):
    ep = build_episode(TaskKind.SEGMENTATION, phantom_pool, sampler_config, np.random.default_rng(0), context_size=3)
    short = truncate(ep, 1)
    assert short.context_size == 1
    assert short.context[0] is ep.context[0]
    assert short.query is ep.query


def test_curves_cover_every_task_and_size(smoke_config):
    report = eval_curves([("model", _neuralizer(smoke_config))], smoke_config)
    cells = {(r.task_kind, r.n, r.metric) for r in report.rows}
    assert cells == {
        (TaskKind.SEGMENTATION, 1, "dice"),
        (TaskKind.SEGMENTATION, 2, "dice"),
        (TaskKind.DENOISE_BIAS, 1, "psnr"),
        (TaskKind.DENOISE_BIAS, 2, "psnr"),
    }
    assert all(r.n_episodes == smoke_config.eval.episodes_per_cell for r in report.rows)
    assert all(0.0 <= r.mean <= 1.0 for r in report.rows if r.metric == "dice")


def test_curves_with_baselines_add_relative_rows(smoke_config):
    models = [
        ("model", _neuralizer(smoke_config)),
        ("b0", _baseline(smoke_config, TaskKind.SEGMENTATION, 2, replicate=0)),
        ("b1", _baseline(smoke_config, TaskKind.SEGMENTATION, 2, replicate=1)),
    ]
    report = eval_curves(models, smoke_config)
    baseline_rows = [r for r in report.rows if r.model_id == BASELINE_ID and r.metric == "dice"]
    assert [(r.task_kind, r.n) for r in baseline_rows] == [(TaskKind.SEGMENTATION, 2)]
    rel = [r for r in report.rows if r.metric == "dice_rel"]
    if baseline_rows[0].mean == 0.0:
        # необученная сеть может не найти ни одного пикселя маски
        assert rel == []
        return
    assert len(rel) == 3
    assert report.cell(BASELINE_ID, TaskKind.SEGMENTATION, 2, "dice_rel").mean == pytest.approx(1.0)
    assert len(report.rows) == 4 + 1 + 3


def test_conflicting_baseline_recipes_are_rejected(smoke_config):
    other = smoke_config.model_copy(update={"seed": 7})
    models = [
        ("b0", _baseline(smoke_config, TaskKind.DENOISE_BIAS, 2)),
        ("b1", _baseline(other, TaskKind.DENOISE_BIAS, 2)),
    ]
    if models[0][1].meta.task_recipe != models[1][1].meta.task_recipe:
        with pytest.raises(ConfigError):
            eval_curves(models, smoke_config)


def test_report_csv_is_reproducible(smoke_config, tmp_path):
    models = [("model", _neuralizer(smoke_config))]
    a = write_report(eval_curves(models, smoke_config), tmp_path / "a.csv")
    b = write_report(eval_curves(models, smoke_config), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 5


def test_eval_rejects_mismatched_image_size(smoke_config):
    bigger = smoke_config.model_copy(update={
        "model": smoke_config.model.model_copy(update={"image_size": 32}),
        "baseline": smoke_config.baseline.model_copy(update={"image_size": 32}),
    })
    with pytest.raises(ConfigError):
        eval_curves([("model", _neuralizer(bigger))], smoke_config)
    with pytest.raises(ConfigError):
        eval_curves([], smoke_config)


def test_eval_dumps_episode_montages(smoke_config, tmp_path):
    cfg = smoke_config.model_copy(update={"eval": smoke_config.eval.model_copy(update={"dump_episodes": 2})})
    eval_curves([("model", _neuralizer(cfg))], cfg, dump_dir=tmp_path / "dump")
    files = sorted(p.name for p in (tmp_path / "dump").iterdir())
    assert len(files) == 2 * 2 * 2
    assert "model_segmentation_n1_ep0.pgm" in files
    assert (tmp_path / "dump" / files[0]).read_bytes().startswith(b"P5\n")


def test_holdout_comparison_requires_matching_metadata(smoke_config):
    plain = ("plain", _neuralizer(smoke_config))
    with pytest.raises(ConfigError):
        holdout_compare(plain, plain, Holdout.parse("task:inpainting"), smoke_config)


def test_self_comparison_has_zero_gap(smoke_config):
    ckpt = ("unseen", _neuralizer(smoke_config, holdout=["task:inpainting"]))
    report = holdout_compare(ckpt, ckpt, Holdout.parse("task:inpainting"), smoke_config)
    gaps = [r for r in report.rows if r.model_id == GAP_ID]
    assert [r.n for r in gaps] == [1, 2]
    assert all(r.metric == "psnr_gap" and r.mean == 0.0 and r.std == 0.0 for r in gaps)
    assert all(r.task_kind == TaskKind.INPAINTING and r.holdout for r in report.rows)
    assert len(report.rows) == 3 * 2


def test_class_holdout_compares_on_that_class(smoke_config):
    seen = ("seen", _neuralizer(smoke_config, seed=1))
    unseen = ("unseen", _neuralizer(smoke_config, seed=2, holdout=["class:4"]))
    report = holdout_compare(seen, unseen, Holdout.parse("class:4"), smoke_config)
    assert {r.task_kind for r in report.rows} == {TaskKind.SEGMENTATION}
    assert {r.metric for r in report.rows} == {"dice", "dice_gap"}


def test_modality_holdout_episode_config():
    cfg = holdout_episodes_config(SamplerConfig(), Holdout.parse("modality:1"))
    assert cfg.held_out_modalities() == {0, 2, 3}
    assert holdout_episodes_config(SamplerConfig(), Holdout.parse("task:inpainting")).holdout == []


def test_relative_scores_use_largest_baseline():
    rows = [
        EvalRow(model_id=BASELINE_ID, task_kind=TaskKind.SEGMENTATION, n=1, metric="dice", mean=0.5, std=0.1,
                n_episodes=20),
        EvalRow(model_id=BASELINE_ID, task_kind=TaskKind.SEGMENTATION, n=4, metric="dice", mean=0.8, std=0.1,
                n_episodes=20),
        EvalRow(model_id="model", task_kind=TaskKind.SEGMENTATION, n=2, metric="dice", mean=0.4, std=0.2,
                n_episodes=20),
        EvalRow(model_id="model", task_kind=TaskKind.DENOISE_BIAS, n=2, metric="psnr", mean=20.0, std=1.0,
                n_episodes=20),
    ]
    rel = {(r.model_id, r.n): r for r in relative_scores(EvalReport(rows=rows))}
    assert set(rel) == {(BASELINE_ID, 1), (BASELINE_ID, 4), ("model", 2)}
    assert rel[("model", 2)].mean == pytest.approx(0.5)
    assert rel[("model", 2)].std == pytest.approx(0.25)
    assert rel[(BASELINE_ID, 4)].metric == "dice_rel"


def test_held_out_cells_are_flagged():
    holdout = [Holdout.parse("task:inpainting"), Holdout.parse("class:3")]
    assert is_held_out(holdout, TaskKind.INPAINTING)
    assert is_held_out(holdout, TaskKind.SEGMENTATION)
    assert not is_held_out(holdout, TaskKind.DENOISE_BIAS)


def test_pgm_writer(tmp_path):
    path = write_pgm(montage([[np.zeros((2, 3)), np.ones((2, 3))]]), tmp_path / "sub" / "m.pgm")
    data = path.read_bytes()
    assert data.startswith(b"P5\n7 2\n255\n")
    assert len(data) == len(b"P5\n7 2\n255\n") + 14
    with pytest.raises(ShapeError):
        write_pgm(np.zeros((2, 2, 2)), tmp_path / "bad.pgm")
