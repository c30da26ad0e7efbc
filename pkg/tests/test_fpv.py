import json
import math

import numpy as np
import pytest

from crossing_attn import dataset as D
from crossing_attn import experiments as X
from crossing_attn.flow import FlowParams
from crossing_attn.fpv import (
    CONFIG_KEYS,
    FNet,
    FNetConfig,
    FNetTrainParams,
    LSTMCell,
    RecurrentState,
    encode_sequence,
    mirror_flows,
    recurrent_step,
    sequence_classify,
    sequence_flows,
    train_fnet,
)
from crossing_attn.tensor import ShapeError, Tensor

SMALL = FNetConfig(frame_size=(16, 16), conv_channels=(4, 4), feature_width=8, recurrent_width=4,
                   flow=FlowParams(levels=2, block=3, search_radius=2), seed=1)


def scalar_lstm(x, h, c, cell):
    """Gate-by-gate loop over units with Python floats."""
    n = cell.width
    wx, wh, b = cell.w_x.data, cell.w_h.data, cell.bias.data
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    h_new, c_new = [], []
    for u in range(n):
        pre = []
        for gate in range(4):
            col = gate * n + u
            z = b[col] + sum(x[i] * wx[i, col] for i in range(len(x))) + sum(h[j] * wh[j, col] for j in range(n))
            pre.append(z)
        i_g, f_g, g_g, o_g = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
        cu = f_g * c[u] + i_g * g_g
        c_new.append(cu)
        h_new.append(o_g * math.tanh(cu))
    return np.array(h_new), np.array(c_new)


class TestRecurrentCell:
    @pytest.mark.parametrize("seed", range(5))
    def test_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cell = LSTMCell(3, 4, rng)
        for p in cell.parameters():
            p.data[...] = rng.standard_normal(p.shape)
        x, h, c = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
        s = recurrent_step(Tensor(x[None]), RecurrentState(Tensor(h[None]), Tensor(c[None])), cell)
        ref_h, ref_c = scalar_lstm(x, h, c, cell)
        np.testing.assert_allclose(s.h.data[0], ref_h, atol=1e-13)
        np.testing.assert_allclose(s.c.data[0], ref_c, atol=1e-13)

    def test_zero_bias_zero_input_stays_zero(self):
        cell = LSTMCell(3, 4, np.random.default_rng(0))
        cell.bias.data[...] = 0
        s = RecurrentState.zeros(2, 4)
        for _ in range(3):
            s = cell(Tensor(np.zeros((2, 3))), s)
        assert np.all(s.h.data == 0) and np.all(s.c.data == 0)

    def test_forget_bias_initialised_to_one(self):
        cell = LSTMCell(3, 4, np.random.default_rng(0))
        assert cell.bias.data.tolist() == [0] * 4 + [1] * 4 + [0] * 8

    def test_shape_mismatch(self):
        cell = LSTMCell(3, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            cell(Tensor(np.zeros((1, 2))), RecurrentState.zeros(1, 4))


class TestFNet:
    def _frames(self, n=3, seed=0):
        rng = np.random.default_rng(seed)
        return [rng.random((16, 16, 3)) for _ in range(n)]

    def test_pdv_valid(self):
        pdv = sequence_classify(self._frames(), FNet(SMALL))
        assert len(pdv) == 3
        assert abs(sum(pdv.p) - 1) < 1e-12 and min(pdv.p) >= 0

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            sequence_classify(self._frames(1), FNet(SMALL))

    def test_wrong_frame_size(self):
        with pytest.raises(ShapeError):
            sequence_flows([np.zeros((8, 8, 3))] * 2, SMALL)

    def test_encoding_shape(self):
        coded = encode_sequence(self._frames(4), SMALL)
        assert coded.shape == (3, 16, 16, 3)
        assert coded.min() >= 0 and coded.max() <= 1

    def test_raw_ablation(self):
        cfg = FNetConfig(**{**SMALL.to_dict(), "use_flow": False})
        coded = encode_sequence(self._frames(4), cfg)
        assert coded.shape == (3, 16, 16, 3)
        assert np.all(coded[..., 0] == coded[..., 2])

    def test_mirror_flows_involution(self):
        f = np.random.default_rng(0).standard_normal((2, 4, 5, 2))
        np.testing.assert_array_equal(mirror_flows(mirror_flows(f)), f)
        m = mirror_flows(f)
        assert m[0, 1, 0, 0] == -f[0, 1, 4, 0] and m[0, 1, 0, 1] == f[0, 1, 4, 1]

    def test_config_keys_exact(self):
        d = json.loads(json.dumps(SMALL.to_dict()))
        assert tuple(d) == CONFIG_KEYS
        assert FNetConfig.from_dict(d) == SMALL
        with pytest.raises(ValueError):
            FNetConfig.from_dict({**d, "depth": 2})

    def test_bad_frame_size(self):
        with pytest.raises(ValueError):
            FNetConfig(frame_size=(18, 16), conv_channels=(4, 4))


class TestTrainFNet:
    def _set(self):
        params = D.SequenceParams(size=(16, 16), n_frames=3)
        return X.encode_motion_set(X.synthetic_sequences(2, 0, params, 1), SMALL)

    def test_deterministic(self):
        data = self._set()
        runs = []
        for _ in range(2):
            model = FNet(SMALL)
            hist = train_fnet(model, data.coded, data.labels, FNetTrainParams(epochs=2, batch_size=4), data.coded_mirror)
            runs.append((model.predict_proba(data.coded), hist))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_zero_lr_keeps_weights(self):
        data = self._set()
        model = FNet(SMALL)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        train_fnet(model, data.coded, data.labels, FNetTrainParams(epochs=1, lr=0.0, weight_decay=0.0), data.coded_mirror)
        for k, v in before.items():
            np.testing.assert_array_equal(model.state_dict()[k], v)

    def test_mirror_requires_input(self):
        data = self._set()
        with pytest.raises(ValueError, match="mirror"):
            train_fnet(FNet(SMALL), data.coded, data.labels, FNetTrainParams(epochs=1))

    def test_bad_labels(self):
        data = self._set()
        with pytest.raises(ValueError):
            train_fnet(FNet(SMALL), data.coded, data.labels + 3, FNetTrainParams(epochs=1, mirror_augment=False))
