"""
Tests for Velocity Network and Layers
"""

import numpy as np
import pytest

from autodiff import Tensor, grad, mean, square
from config import VelocityNetConfig
from data import Discretization
from errors import DomainError, NonFiniteError, ShapeError
from layers import MLP, FourierTimeEmbedding, Linear, count_linear, count_mlp
from spectral import FftOperator, NudftOperator, n_modes, resample
from velocity_net import (
    FnoBlock, VelocityNet, embed_context, fno_block, load_checkpoint, save_checkpoint, velocity_forward,
)


def small_config(**overrides) -> VelocityNetConfig:
    values = dict(modes=4, n_blocks=2, channels=6, context_channels=4, pos_embed_channels=3,
                  pos_embed_width=8, time_embed_channels=3, time_features=4, eta_embed_width=8,
                  eta_embed_channels=5, head_width=8, spectral_feature_width=6)
    values.update(overrides)
    return VelocityNetConfig(**values)


def randomize_outputs(net: VelocityNet, rng: np.random.Generator) -> None:
    """Replace the zero-initialized output layers so every branch carries signal"""
    net.projection.W.data = rng.standard_normal(net.projection.W.shape) * 0.5
    if net.cfg.eta_dim > 0:
        last = net.eta_head.layers[-1]
        last.W.data = rng.standard_normal(last.W.shape) * 0.5


def expected_parameter_count(cfg: VelocityNetConfig, dim: int) -> int:
    k = n_modes(cfg.modes, dim)
    c = cfg.channels
    eta = cfg.eta_embed_channels if cfg.eta_dim > 0 else 0
    cond = cfg.pos_embed_channels + cfg.time_embed_channels + eta
    total = count_linear(cfg.theta_channels + cfg.x_channels, cfg.context_channels)
    if cfg.pos_embed_channels > 0:
        total += count_mlp([dim, cfg.pos_embed_width, cfg.pos_embed_channels])
    total += count_linear(2 * cfg.time_features, cfg.time_embed_channels)
    if cfg.eta_dim > 0:
        total += count_mlp([cfg.eta_dim, cfg.eta_embed_width, cfg.eta_embed_channels])
    total += count_linear(cfg.context_channels + cond, c)
    if cfg.embed_every_block:
        total += (cfg.n_blocks - 1) * count_linear(cond, c)
    total += cfg.n_blocks * (k * c * c * 2 + c * c + c)
    total += count_linear(c, cfg.theta_channels)
    if cfg.eta_dim > 0:
        w = cfg.spectral_feature_width
        total += count_linear(k * c * 2, w) + count_linear(k * cfg.x_channels * 2, w)
        total += count_mlp([2 * w + cfg.eta_dim + cfg.time_embed_channels, cfg.head_width, cfg.eta_dim])
    return total


class TestLayers:
    """Test dense building blocks"""

    def test_linear_shape_error(self, rng):
        """Test input feature mismatch"""
        layer = Linear(3, 2, rng)
        with pytest.raises(ShapeError):
            layer(np.zeros((4, 5)))

    def test_mlp_parameter_count(self, rng):
        """Parameter count matches the closed form"""
        mlp = MLP([3, 7, 2], rng)
        assert mlp.parameter_count() == count_mlp([3, 7, 2])

    def test_mlp_zero_last(self, rng):
        """A zero last layer gives zero output"""
        mlp = MLP([3, 7, 2], rng, zero_last=True)
        assert np.all(mlp(rng.standard_normal((5, 3))).data == 0.0)

    def test_time_embedding_frozen_features(self, rng):
        """Fourier frequencies are frozen; t=0 and t=1 differ"""
        emb = FourierTimeEmbedding(4, 3, 4.0, rng)
        assert emb.freqs.frozen
        assert emb.parameter_count() == count_linear(8, 3)
        out = emb(np.array([0.0, 1.0])).data
        assert not np.allclose(out[0], out[1])

    def test_state_dict_round_trip(self, rng):
        """State loads into a fresh module"""
        a, b = MLP([2, 4, 1], rng), MLP([2, 4, 1], np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        x = rng.standard_normal((3, 2))
        assert np.array_equal(a(x).data, b(x).data)

    def test_state_dict_missing(self, rng):
        """Test missing parameters are reported"""
        with pytest.raises(KeyError):
            MLP([2, 4, 1], rng).load_state_dict({})


class TestFnoBlock:
    """Test a single FNO block"""

    def test_identity_hook(self, rng):
        """R=0, W=I, bias=0 and identity activation reproduce the input"""
        grid = Discretization.uniform(16)
        block = FnoBlock(3, n_modes(4, 1), rng)
        block.params.R.data = np.zeros(block.params.R.shape)
        block.params.W.data = np.eye(3)
        block.params.bias.data = np.zeros(3)
        a = rng.standard_normal((2, 16, 3))
        out = fno_block(a, block.params, NudftOperator(grid.positions, 4), activation=lambda h: h)
        assert np.allclose(out.data, a, atol=1e-12)

    def test_output_on_input_points(self, rng):
        """Output lives on the input's irregular points"""
        block = FnoBlock(3, n_modes(4, 1), rng)
        op = NudftOperator(rng.uniform(size=(2, 23, 1)), 4)
        assert fno_block(rng.standard_normal((2, 23, 3)), block.params, op).shape == (2, 23, 3)

    def test_fft_and_nudft_paths_agree(self, rng):
        """Both transform paths give the same block output on a uniform grid"""
        grid = Discretization.uniform((8, 8))
        block = FnoBlock(3, n_modes(3, 2), rng)
        a = rng.standard_normal((2, 64, 3))
        fft = fno_block(a, block.params, FftOperator(grid, 3)).data
        nudft = fno_block(a, block.params, NudftOperator(grid.positions, 3)).data
        assert np.max(np.abs(fft - nudft)) < 1e-6

    def test_point_count_mismatch(self, rng):
        """A transform built for other points is rejected"""
        block = FnoBlock(3, n_modes(4, 1), rng)
        op = NudftOperator(Discretization.uniform(16).positions, 4)
        with pytest.raises(DomainError):
            fno_block(rng.standard_normal((1, 12, 3)), block.params, op)


class TestVelocityNet:
    """Test the conditional velocity field"""

    def _batch(self, rng, b=2, n_theta=20, n_x=15, eta_dim=0):
        pos_theta = np.sort(rng.uniform(size=(b, n_theta, 1)), axis=1)
        pos_x = np.sort(rng.uniform(size=(b, n_x, 1)), axis=1)
        xi = rng.standard_normal((b, n_theta, 1))
        x_o = rng.standard_normal((b, n_x, 1))
        eta = rng.standard_normal((b, eta_dim)) if eta_dim else None
        return pos_theta, pos_x, xi, x_o, eta

    @pytest.mark.parametrize("eta_dim", [0, 2])
    def test_parameter_count_closed_form(self, eta_dim, rng):
        """Trainable parameter count is a function of the config"""
        cfg = small_config(eta_dim=eta_dim)
        assert VelocityNet(cfg, 1, rng).parameter_count() == expected_parameter_count(cfg, 1)
        cfg2 = small_config(embed_every_block=False, pos_embed_channels=0)
        assert VelocityNet(cfg2, 2, rng).parameter_count() == expected_parameter_count(cfg2, 2)

    def test_embedding_channels(self, rng):
        """Channel count follows the config arithmetic"""
        net = VelocityNet(small_config(), 1, rng)
        pos_theta, pos_x, xi, x_o, _ = self._batch(rng)
        emb = embed_context(net, 0.5, xi, pos_theta, pos_x, None, x_o)
        assert emb.shape == (2, 20, 4 + 3 + 3)

        net_eta = VelocityNet(small_config(eta_dim=2), 1, rng)
        pos_theta, pos_x, xi, x_o, eta = self._batch(rng, eta_dim=2)
        emb = embed_context(net_eta, 0.5, xi, pos_theta, pos_x, eta, x_o)
        assert emb.shape == (2, 20, 4 + 3 + 3 + 5)

    def test_time_channels_differ(self, rng):
        """t=0 and t=1 produce different embeddings"""
        net = VelocityNet(small_config(), 1, rng)
        pos_theta, pos_x, xi, x_o, _ = self._batch(rng)
        e0 = embed_context(net, 0.0, xi, pos_theta, pos_x, None, x_o).data
        e1 = embed_context(net, 1.0, xi, pos_theta, pos_x, None, x_o).data
        assert not np.allclose(e0, e1)

    def test_observation_alignment_is_discretization_free(self, rng):
        """A band-limited observation on two grids aligns to the same channels"""
        net = VelocityNet(small_config(modes=4), 1, rng)
        pos_theta = np.sort(rng.uniform(size=(1, 20, 1)), axis=1)
        aligned = []
        for n in (32, 40):
            grid = Discretization.uniform(n)
            x_o = np.cos(2 * np.pi * 2 * grid.positions)[None]
            aligned.append(net.condition(x_o, grid.positions[None], pos_theta).x_aligned)
        assert np.max(np.abs(aligned[0] - aligned[1])) < 1e-8
        assert np.allclose(aligned[0][0, :, 0], np.cos(2 * np.pi * 2 * pos_theta[0, :, 0]), atol=1e-8)

    def test_initial_velocity_is_zero(self, rng):
        """Zero-initialized projections give zero velocities of the right shapes"""
        net = VelocityNet(small_config(eta_dim=2), 1, rng)
        pos_theta, pos_x, xi, x_o, eta = self._batch(rng, eta_dim=2)
        v_theta, v_eta = velocity_forward(net, 0.3, xi, x_o, pos_theta, pos_x, eta)
        assert v_theta.shape == (2, 20, 1) and np.all(v_theta == 0.0)
        assert v_eta.shape == (2, 2) and np.all(v_eta == 0.0)

    def test_no_eta_gives_empty_vector(self, rng):
        """eta_dim=0 returns an empty eta velocity"""
        net = VelocityNet(small_config(), 1, rng)
        pos_theta, pos_x, xi, x_o, _ = self._batch(rng)
        _, v_eta = velocity_forward(net, 0.3, xi, x_o, pos_theta, pos_x)
        assert v_eta.shape == (2, 0)

    def test_unseen_discretization(self, rng):
        """The velocity lives on whatever points are supplied"""
        net = VelocityNet(small_config(), 1, rng)
        randomize_outputs(net, rng)
        for n in (11, 37):
            pos_theta, pos_x, xi, x_o, _ = self._batch(rng, b=1, n_theta=n)
            v_theta, _ = velocity_forward(net, 0.3, xi, x_o, pos_theta, pos_x)
            assert v_theta.shape == (1, n, 1)

    def test_permutation_equivariance(self, rng):
        """Permuting (position, value) pairs permutes the velocity"""
        net = VelocityNet(small_config(), 1, rng)
        randomize_outputs(net, rng)
        pos_theta, pos_x, xi, x_o, _ = self._batch(rng, b=1)
        perm = rng.permutation(20)
        v, _ = velocity_forward(net, 0.4, xi, x_o, pos_theta, pos_x)
        v_perm, _ = velocity_forward(net, 0.4, xi[:, perm], x_o, pos_theta[:, perm], pos_x)
        assert np.allclose(v[:, perm], v_perm, atol=1e-10)

    def test_discretization_invariance(self):
        """Outputs on N=128 and N=256 grids agree after resampling to a common grid"""
        rng = np.random.default_rng(21)
        net = VelocityNet(small_config(modes=8, channels=8), 1, rng)
        randomize_outputs(net, rng)
        outputs = {}
        for n in (128, 256):
            grid = Discretization.uniform(n)
            pos = grid.positions
            xi = (np.sin(2 * np.pi * pos) + 0.5 * np.cos(2 * np.pi * 3 * pos))[None]
            x_o = np.cos(2 * np.pi * 2 * pos)[None]
            v, _ = velocity_forward(net, 0.5, xi, x_o, pos[None], pos[None])
            outputs[n] = (v[0], grid)
        common = Discretization.uniform(64)
        a = resample(outputs[128][0], outputs[128][1], common, 8)
        b = resample(outputs[256][0], outputs[256][1], common, 8)
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 5e-2

    def test_all_weights_receive_gradient(self, rng):
        """Every trainable weight gets a nonzero gradient"""
        net = VelocityNet(small_config(eta_dim=2), 1, rng)
        randomize_outputs(net, rng)
        pos_theta, pos_x, xi, x_o, eta = self._batch(rng, eta_dim=2)
        cond = net.condition(x_o, pos_x, pos_theta)
        v_theta, v_eta = net.forward(np.array([0.2, 0.7]), Tensor(xi), Tensor(eta), cond)
        loss = mean(square(v_theta)) + mean(square(v_eta))
        names = [name for name, p in net.named_parameters().items() if p.requires_grad]
        grads = grad(loss, net.parameters())
        dead = [name for name, g in zip(names, grads) if not np.any(g != 0.0)]
        assert dead == []

    def test_non_finite_input_is_reported(self, rng):
        """NaN values raise with the failing location"""
        net = VelocityNet(small_config(), 1, rng)
        pos_theta, pos_x, xi, x_o, _ = self._batch(rng)
        xi[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError) as exc:
            velocity_forward(net, 0.3, xi, x_o, pos_theta, pos_x)
        assert exc.value.location == "embedding"

    def test_empty_discretization(self, rng):
        """Test empty positions"""
        net = VelocityNet(small_config(), 1, rng)
        with pytest.raises(DomainError):
            net.condition(np.zeros((1, 0, 1)), np.zeros((1, 0, 1)), np.zeros((1, 5, 1)))


class TestCheckpoint:
    """Test checkpoint archives"""

    def test_round_trip(self, tmp_path, rng):
        """Saved weights reproduce the same velocity"""
        cfg = small_config()
        net = VelocityNet(cfg, 1, rng)
        randomize_outputs(net, rng)
        save_checkpoint(net, str(tmp_path / "model"), "fnope", cfg.model_dump(), 1, {"seed": 3})
        state, meta = load_checkpoint(str(tmp_path / "model"))
        assert meta["seed"] == 3 and meta["precision"] == "float64"

        restored = VelocityNet(VelocityNetConfig(**meta["config"]), meta["dim"], np.random.default_rng(0))
        restored.load_state_dict(state)
        pos = Discretization.uniform(16).positions[None]
        xi = rng.standard_normal((1, 16, 1))
        a, _ = velocity_forward(net, 0.5, xi, xi, pos, pos)
        b, _ = velocity_forward(restored, 0.5, xi, xi, pos, pos)
        assert np.array_equal(a, b)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
