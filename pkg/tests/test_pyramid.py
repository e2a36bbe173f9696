import numpy as np
import pytest

from mvp import tensor as T
from mvp.config import (ConfigError, ModelConfig, Scope, StageConfig, desk_profile, full_profile,
                        load_config, micro_profile)
from mvp.model import MVPModel
from mvp.nn import Conv2d, Linear
from mvp.pyramid import TokenExpand, mvp_forward, reduce_tokens, run_stage
from mvp.tensor import DimensionError
from mvp.tokenizer import TokenSet


def rand_tokens(n, grid, dim, seed=0):
    rng = np.random.default_rng(seed)
    return TokenSet(T.Tensor(rng.normal(size=(n, grid[0] * grid[1], dim))),
                    T.Tensor(rng.normal(size=(n, 4, dim))), grid)


def test_profiles():
    d, f = desk_profile(), full_profile()
    assert [s.dim for s in d.stages] == [32, 64, 128]
    assert [s.dim for s in f.stages] == [256, 512, 1024]
    assert [s.n_blocks for s in f.stages] == [2, 4, 8] and f.group_size == 4
    assert [s.patch for s in d.stages] == [8, 16, 32]


def test_config_validation():
    with pytest.raises(ConfigError):
        desk_profile(height=48)
    with pytest.raises(ConfigError):
        ModelConfig(stages=(StageConfig("frame", 1, 32, 8), StageConfig("group", 1, 32, 16),
                            StageConfig("global", 1, 128, 32)))
    with pytest.raises(ConfigError):
        ModelConfig(stages=desk_profile().stages[:2])
    with pytest.raises(ConfigError):
        Scope("window")


def test_config_json_round_trip(tmp_path):
    cfg = desk_profile(group_size=2)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert load_config(str(p)) == cfg
    assert load_config("micro") == micro_profile()
    assert '"schema": 1' in cfg.to_json()


def test_reduce_tokens_shapes_and_constants():
    t = TokenSet(T.Tensor(np.ones((2, 64, 32))), T.Tensor(np.ones((2, 4, 32))), (8, 8))
    conv = Conv2d(32, 64, 2, np.random.default_rng(0), stride=2)
    conv.weight.data[:] = 0
    for o in range(64):
        conv.weight.data[o, o % 32] = 0.25  # mean pool of one input channel
    reg = Linear(32, 64, np.random.default_rng(1))
    out = reduce_tokens(t, conv, reg)
    assert out.grid == (4, 4) and out.dim == 64 and out.spatial.shape[1] == 16
    assert out.n_registers == 4 and out.registers.shape[-1] == 64 and out.stage_tag == 2
    assert np.allclose(out.spatial.data, 1.0)
    with pytest.raises(DimensionError):
        reduce_tokens(rand_tokens(1, (3, 4), 32), conv, reg)


def test_expand_tokens_shapes():
    t = rand_tokens(2, (2, 2), 64)
    out = TokenExpand(64, np.random.default_rng(0))(t)
    assert out.grid == (4, 4) and out.dim == 32 and out.n_registers == 4


def test_forward_grids_and_dims(desk_model, desk_scene):
    with T.no_record():
        F = mvp_forward(desk_model, desk_scene.posed_images())
    assert [f.grid for f in F] == [(8, 8), (4, 4), (2, 2)]
    assert [f.dim for f in F] == [32, 64, 128]
    assert [f.spatial.shape[1] for f in F] == [64, 16, 4]


def test_forward_single_view(desk_model, desk_scene):
    with T.no_record():
        F = mvp_forward(desk_model, desk_scene.posed_images([0]))
    assert F[2].views == 1


def test_forward_is_deterministic(desk_scene):
    a = MVPModel(desk_profile(), seed=3)
    b = MVPModel(desk_profile(), seed=3)
    with T.no_record():
        fa = mvp_forward(a, desk_scene.posed_images())
        fb = mvp_forward(b, desk_scene.posed_images())
    assert all(np.array_equal(x.joined().data, y.joined().data) for x, y in zip(fa, fb))


def test_stage1_view_equivariance(desk_model, desk_scene):
    posed = desk_scene.posed_images()
    perm = [2, 0, 3, 1]
    with T.no_record():
        a = mvp_forward(desk_model, posed, stop_after=0)[0].joined().data
        b = mvp_forward(desk_model, posed[perm], stop_after=0)[0].joined().data
    assert np.array_equal(a[perm], b)


def test_unit_lengths_bounded(desk_scene):
    cfg = desk_profile()
    model = MVPModel(cfg)
    posed = np.concatenate([desk_scene.posed_images()] * 2)  # N = 8
    log = []
    with T.no_record():
        mvp_forward(model, posed, unit_log=log)
    N, M, hw = 8, cfg.group_size, 64 * 64 // 64
    bound = max(M * hw // 4 + 4 * M, N * hw // 16 + 4 * N)
    assert max(log) <= bound and max(log) == 4 * (16 + 4)


def test_stage2_with_group_n_matches_global(desk_scene):
    cfg = desk_profile(group_size=4)
    model = MVPModel(cfg)
    with T.no_record():
        t = mvp_forward(model, desk_scene.posed_images(), stop_after=1)[1]
        s2 = cfg.stages[1]
        g = run_stage(s2, t, model.stages[1], group_size=4)
        glob = run_stage(StageConfig("global", s2.n_blocks, s2.dim, s2.patch), t, model.stages[1])
    assert np.array_equal(g.joined().data, glob.joined().data)


def test_checkpoint_round_trip(tmp_path, micro_model, micro_scene):
    micro_model.save(tmp_path / "ck")
    back = MVPModel.load(tmp_path / "ck")
    assert back.cfg == micro_model.cfg
    for (k, a), (k2, b) in zip(micro_model.named_parameters(), back.named_parameters()):
        assert k == k2 and np.array_equal(a.data, b.data)
    with T.no_record():
        x = micro_model.raw_outputs(micro_scene.posed_images()).data
        y = back.raw_outputs(micro_scene.posed_images()).data
    assert np.array_equal(x, y)


def test_reversed_forward_runs(desk_scene):
    from mvp.bench import make_variant

    model = MVPModel(make_variant(desk_profile(), "reversed"))
    with T.no_record():
        F = model.features(desk_scene.posed_images())
        gs = model.predict(np.stack(desk_scene.images), desk_scene.cameras)
    assert [f.grid for f in F] == [(2, 2), (4, 4), (8, 8)]
    assert len(gs) == 4 * 64 * 64
    assert np.allclose(np.linalg.norm(gs.quats.data, axis=1), 1, atol=1e-6)
