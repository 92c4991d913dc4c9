"""UNO / MNO composition, fusion wiring and spec-driven construction."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gfmm import tensor as T
from gfmm.block1d import GFMMBlock1D, GFMMConfig, assemble_dense, passthrough_block
from gfmm.errors import ConfigError, DimensionError
from gfmm.models import (ChannelSpec, UNOModel, build_model, fusion_from_latent,
                         latent_to_epsilon)


def mno_spec(L=2, rhs_act=("rational", "identity"), **extra):
    return dict(kind="mno", coeff_blocks=[{"L": L, "activation": "rational"}] * 2,
                rhs_blocks=[{"L": L, "activation": a} for a in rhs_act], **extra)


class TestChannelSpec:
    def test_stack_and_broadcast(self):
        spec = ChannelSpec(["c", "g"], scales={"c": 2.0})
        out = spec.stack({"c": np.ones((3, 4)), "g": np.arange(3.0)}, 4, np.dtype(np.float64))
        assert out.shape == (3, 2, 4)
        assert_array_equal(out[:, 0], 2)
        assert_array_equal(out[:, 1], np.repeat(np.arange(3.0)[:, None], 4, axis=1))

    def test_transforms(self):
        spec = ChannelSpec(["a"], scales={"a": 3.0}, transforms={"a": "reciprocal"})
        out = spec.stack({"a": np.full((1, 2), 4.0)}, 2, np.dtype(np.float64))
        assert_allclose(out, 0.75)
        with pytest.raises(ConfigError):
            ChannelSpec(["a"], transforms={"a": "sqrt"})

    def test_missing_field(self):
        with pytest.raises(DimensionError):
            ChannelSpec(["a", "c"]).stack({"c": np.ones((1, 4))}, 4, np.dtype(np.float32))

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            ChannelSpec(["c"]).stack({"c": np.ones((1, 5))}, 4, np.dtype(np.float32))

    def test_unique_names(self):
        with pytest.raises(ConfigError):
            ChannelSpec(["a", "a"])
        assert ChannelSpec(["a", "b", "f"]).channels == {"a": 0, "b": 1, "f": 2}


class TestLatent:
    def test_reinterpretation(self):
        h = np.array([[1.0, 2.0], [3.0, 4.0]])
        eps = latent_to_epsilon(h)
        assert_array_equal(eps, h)
        assert_array_equal(np.ravel(eps), np.ravel(h))
        assert_array_equal(latent_to_epsilon(np.zeros((3, 3))), 0)

    def test_width_mismatch(self):
        with pytest.raises(ConfigError):
            latent_to_epsilon(np.zeros((2, 3)))

    def test_fusion_index_map(self):
        blk = GFMMBlock1D.random(GFMMConfig(D=16, L=2, c_hidden=4, c_out=4), 0)
        _, lat = blk.forward(np.random.default_rng(1).standard_normal((2, 1, 16)))
        fus = fusion_from_latent(lat, 2)
        assert set(fus) == {("enc", 1), ("enc", 2), ("dec", 0), ("dec", 1)}
        # encoder weight j at level l reads h[l][j // 2]
        for j in range(4):
            assert_array_equal(fus[("enc", 1)].data[j], lat.h[1].data[j // 2])
        assert_array_equal(fus[("dec", 0)].data, lat.z[0].data)


class TestUNO:
    def test_passthrough(self):
        cfg = GFMMConfig(D=16, L=2)
        m = UNOModel([passthrough_block(cfg)], ["c"])
        c = np.random.default_rng(0).standard_normal((3, 16))
        assert_array_equal(m.predict({"c": c}), c)

    def test_zero_second_block(self):
        cfg = GFMMConfig(D=16, L=2)
        m = UNOModel([GFMMBlock1D.random(cfg, 0), GFMMBlock1D.zeros(cfg)], ["c"])
        assert_array_equal(m.predict({"c": np.ones((2, 16))}), 0)

    def test_dense_composition(self):
        cfg = GFMMConfig(D=32, L=3)
        b1, b2 = GFMMBlock1D.random(cfg, 1), GFMMBlock1D.random(cfg, 2)
        m = UNOModel([b1, b2], ["c"])
        c = np.random.default_rng(3).standard_normal((5, 32))
        want = c @ (assemble_dense(b2) @ assemble_dense(b1)).T
        assert np.max(np.abs(m.predict({"c": c}) - want)) <= 1e-12

    def test_table_parameter_total(self):
        m = build_model({"kind": "uno", "blocks": [{"L": 4}, {"L": 4}]}, D=256, rng=0)
        assert m.num_parameters() == 73_216

    def test_channel_permutation_covariance(self):
        rng = np.random.default_rng(4)
        m = build_model({"kind": "uno", "inputs": ["a", "c"],
                         "blocks": [{"L": 2, "activation": "rational", "c_hidden": 3}, {"L": 2}]},
                        D=16, rng=5, dtype=np.float64)
        p = build_model({"kind": "uno", "inputs": ["c", "a"],
                         "blocks": [{"L": 2, "activation": "rational", "c_hidden": 3}, {"L": 2}]},
                        D=16, rng=None, dtype=np.float64)
        state = m.state_dict()
        perm = {}
        for k, v in state.items():
            if k in ("blocks.0.enc.1", "blocks.0.bridge.0.diag", "blocks.0.bridge.0.lower",
                     "blocks.0.bridge.0.upper"):
                v = v[:, :, ::-1]
            perm[k] = v
        p.load_state_dict(perm)
        fields = {"a": rng.standard_normal((3, 16)), "c": rng.standard_normal((3, 16))}
        assert np.max(np.abs(m.predict(fields) - p.predict(fields))) <= 1e-12

    def test_chain_mismatch(self):
        with pytest.raises(ConfigError):
            UNOModel([GFMMBlock1D.zeros(GFMMConfig(D=16, L=2, c_out=2)),
                      GFMMBlock1D.zeros(GFMMConfig(D=16, L=2))], ["c"])


class TestMNO:
    def test_zero_coefficient_branch_is_uno(self):
        m = build_model(mno_spec(), D=16, rng=0, dtype=np.float64)
        for blk in m.coeff_blocks:
            for w in blk.parameters():
                w.data[:] = 0
        rng = np.random.default_rng(1)
        fields = {"a": rng.uniform(1, 2, (3, 16)), "c": rng.standard_normal((3, 16))}
        assert_array_equal(m.predict(fields), m.rhs_uno().predict(fields))
        assert_array_equal(m.predict(fields, fusion=False), m.rhs_uno().predict(fields))

    def test_scalar_unroll(self):
        # D = 2, P = 1, L = 1: every weight is a scalar
        m = build_model(dict(kind="mno", coeff_blocks=[{"L": 1, "activation": "rational"}],
                             rhs_blocks=[{"L": 1, "activation": "rational"}]),
                        D=2, rng=3, dtype=np.float64)
        phi = lambda x: x / (1 + abs(x))
        cw = {k: v.data.reshape(v.shape[0], -1)[:, 0] for k, v in m.coeff_blocks[0].named_parameters()}
        rw = {k: v.data.reshape(v.shape[0], -1)[:, 0] for k, v in m.rhs_blocks[0].named_parameters()}
        a, c = np.array([0.3, -1.2]), np.array([0.8, 0.5])

        def bridge0(w, h):
            return [w["bridge.0.diag"][0] * h[0] + w["bridge.0.upper"][0] * h[1],
                    w["bridge.0.diag"][1] * h[1] + w["bridge.0.lower"][0] * h[0]]

        h1 = phi(cw["enc.1"][0] * a[0]) + phi(cw["enc.1"][1] * a[1])
        z1 = cw["bridge.1.diag"][0] * h1
        br = bridge0(cw, a)
        z0 = [phi(cw["dec.0"][i] * z1) + br[i] for i in range(2)]

        g1 = phi((rw["enc.1"][0] + h1) * c[0]) + phi((rw["enc.1"][1] + h1) * c[1])
        y1 = rw["bridge.1.diag"][0] * g1
        br = bridge0(rw, c)
        u = [phi((rw["dec.0"][i] + z0[i]) * y1) + br[i] for i in range(2)]
        assert_allclose(m.predict({"a": a[None], "c": c[None]})[0], u, rtol=1e-13)

    def test_fusion_participates_in_gradients(self):
        m = build_model(mno_spec(), D=16, rng=4, dtype=np.float64)
        rng = np.random.default_rng(5)
        fields = {"a": rng.uniform(1, 2, (4, 16)), "c": rng.standard_normal((4, 16))}
        target = rng.standard_normal((4, 16))
        params = m.parameters()
        with T.Tape() as tape:
            loss = T.mse(m(fields), target)
        tape.backward(loss, params)
        for name, p in m.named_parameters():
            assert np.all(np.isfinite(p.grad)), name
        coeff_grad = sum(np.abs(p.grad).sum() for n, p in m.named_parameters() if n.startswith("coeff"))
        assert coeff_grad > 0
        res = T.grad_check(lambda: T.mse(m(fields), target), params, probes=200, rng=0,
                           names=[n for n, _ in m.named_parameters()])
        assert res.passed(1e-5), res.max_rel_error

    def test_rhs_linear_coefficient_nonlinear(self):
        spec = dict(kind="mno", coeff_blocks=[{"L": 2}] * 2, rhs_blocks=[{"L": 2}] * 2)
        m = build_model(spec, D=16, rng=6, dtype=np.float64)
        rng = np.random.default_rng(7)
        a = rng.uniform(1, 2, (1, 16))
        c1, c2, a2 = rng.standard_normal((3, 1, 16))
        f = lambda a, c: m.predict({"a": a, "c": c})
        lin = f(a, 2 * c1 - 3 * c2) - (2 * f(a, c1) - 3 * f(a, c2))
        assert np.max(np.abs(lin)) <= 1e-12
        non_add = f(a + a2, c1) - (f(a, c1) + f(a2, c1) - f(0 * a, c1))
        assert np.max(np.abs(non_add)) > 1e-6

    def test_coefficient_width_forced(self):
        m = build_model(mno_spec(L=2), D=32, rng=0)
        assert all(b.config.c_hidden == b.config.c_out == 8 for b in m.coeff_blocks)
        with pytest.raises(ConfigError) as err:
            build_model(dict(kind="mno", coeff_blocks=[{"L": 2, "c_hidden": 4}], rhs_blocks=[{"L": 2}]), D=32)
        assert err.value.field == "model.coeff_blocks.0.c_hidden"

    def test_unequal_branches(self):
        with pytest.raises(ConfigError):
            build_model(dict(kind="mno", coeff_blocks=[{"L": 2}] * 2, rhs_blocks=[{"L": 2}]), D=16)

    def test_depth_mismatch(self):
        with pytest.raises(ConfigError):
            build_model(dict(kind="mno", coeff_blocks=[{"L": 2}], rhs_blocks=[{"L": 1}]), D=16)

    def test_partial_fusion(self):
        spec = mno_spec(fusion_on_block=[True, False])
        m = build_model(spec, D=16, rng=0, dtype=np.float64)
        assert m.rhs_blocks[0].config.fusion_enabled and not m.rhs_blocks[1].config.fusion_enabled
        with pytest.raises(ConfigError):
            build_model(mno_spec(fusion_on_block=[True]), D=16)

    def test_paper_layout(self):
        m = build_model(mno_spec(L=4), D=256, rng=0)
        assert [b.config.activation for b in m.coeff_blocks] == ["rational", "rational"]
        assert [b.config.activation for b in m.rhs_blocks] == ["rational", "identity"]

    def test_bvp_channels(self):
        spec = mno_spec(coeff_inputs=["a", "b", "f"], rhs_inputs=["c", "g"])
        m = build_model(spec, D=16, rng=0)
        assert m.coeff_blocks[0].config.c_in == 3 and m.rhs_blocks[0].config.c_in == 2
        out = m.predict({"a": np.ones((2, 16)), "b": np.ones((2, 16)), "f": np.ones((2, 16)),
                         "c": np.ones((2, 16)), "g": np.ones(2)})
        assert out.shape == (2, 16)


class TestBuildModel:
    def test_p_from_depth(self):
        m = build_model({"kind": "uno", "blocks": [{"L": 5}]}, D=256, rng=0)
        assert m.blocks[0].config.P == 8
        m = build_model({"kind": "uno", "blocks": [{"P": 8}]}, D=256, rng=0)
        assert m.blocks[0].config.L == 5

    def test_field_paths(self):
        with pytest.raises(ConfigError) as err:
            build_model({"kind": "uno", "blocks": [{"L": 4}, {"L": 9}]}, D=256)
        assert err.value.field == "model.blocks.1"
        with pytest.raises(ConfigError) as err:
            build_model({"kind": "uno", "blocks": [{"L": 4, "activation": "gelu"}]}, D=256)
        assert err.value.field == "model.blocks.0.activation"
        with pytest.raises(ConfigError) as err:
            build_model({"kind": "transformer"}, D=256)
        assert err.value.field == "model.kind"

    def test_zero_init_without_rng(self):
        m = build_model({"kind": "uno", "blocks": [{"L": 2}]}, D=16)
        assert all(np.all(p.data == 0) for p in m.parameters())

    def test_spec_recorded(self):
        m = build_model({"kind": "uno", "blocks": [{"L": 2}]}, D=16, rng=0, input_scales={"c": 0.5})
        assert m.spec["D"] == 16 and m.spec["input_scales"] == {"c": 0.5}
        again = build_model(m.spec, rng=None)
        assert again.D == 16 and again.inputs.scales == {"c": 0.5}

    def test_init_scale(self):
        a = build_model({"kind": "uno", "blocks": [{"L": 2}]}, D=16, rng=0)
        b = build_model({"kind": "uno", "blocks": [{"L": 2, "init_scale": 0.1}]}, D=16, rng=0)
        assert_allclose(b.parameters()[0].data, 0.1 * a.parameters()[0].data, rtol=1e-6)

    def test_uno2d(self):
        m = build_model({"kind": "uno2d", "blocks": [{"P": 4}, {"L": 2}]}, D=16, rng=0, input_scales={"c": 2.0})
        assert m.predict({"c": np.zeros((1, 16, 16))}).shape == (1, 16, 16)
        with pytest.raises(ConfigError):
            build_model({"kind": "uno2d", "blocks": [{"P": 4, "L": 3}]}, D=16)

    def test_load_state_dict_checks(self):
        m = build_model({"kind": "uno", "blocks": [{"L": 2}]}, D=16, rng=0)
        with pytest.raises(ConfigError):
            m.load_state_dict({})
        bad = {k: np.zeros(3) for k in m.state_dict()}
        with pytest.raises(DimensionError):
            m.load_state_dict(bad)
