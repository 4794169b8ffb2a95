import math

import numpy as np
import pytest
from scipy.stats import norm

from evc.data import write_toy_corpus
from evc.entropy import (
    TOTAL,
    Bitstream,
    DiscreteCDF,
    FactorizedPrior,
    RangeDecoder,
    RangeEncoder,
    TableSet,
    decode_symbol,
    encode_symbol,
    factorized_decode,
    factorized_rate_and_code,
    gaussian_bits,
    gaussian_cdf_table,
    gaussian_table_set,
    integerize,
    rate_estimate,
    unzigzag,
    zigzag,
)
from evc.errors import DecodeError, ValidationError
from evc.imageio import read_image, to_batch
from evc.model import anchor_mask, compress, decode_symbols, entropy_params, quantize
from evc.tensor import Tensor, finite_diff_check, parameter, tsum


def _roundtrip(cdfs, symbols):
    enc = RangeEncoder()
    for cdf, s in zip(cdfs, symbols):
        encode_symbol(enc, cdf, s)
    data = enc.finish()
    dec = RangeDecoder(data)
    return [decode_symbol(dec, cdf) for cdf in cdfs], data


class TestIntegerize:
    def test_counts_sum_and_floor(self, rng):
        probs = rng.dirichlet(np.ones(20), size=50)
        probs[:, 3] = 0.0
        counts = integerize(probs)
        assert np.all(counts.sum(axis=1) == TOTAL)
        assert counts.min() >= 1

    def test_gaussian_tables_always_valid(self, rng):
        for _ in range(1000):
            cdf = gaussian_cdf_table(rng.normal(0.0, 5.0), rng.uniform(0.05, 20.0), -8, 8)
            assert int(cdf.counts.sum()) == TOTAL
            assert np.all(np.diff(cdf.cdf) >= 1)
            assert cdf.cdf[0] == 0 and cdf.cdf[-1] == TOTAL

    def test_alphabet_too_large(self):
        with pytest.raises(ValidationError):
            integerize(np.ones((1, TOTAL + 1)))


class TestRangeCoder:
    @pytest.mark.parametrize("seed", range(100))
    def test_random_tables_roundtrip(self, seed):
        gen = np.random.default_rng(seed)
        n = 100
        cdfs = []
        symbols = []
        for _ in range(n):
            size = int(gen.integers(1, 40))
            cdf = DiscreteCDF.from_probabilities(gen.dirichlet(np.ones(size + 1)), s_min=int(gen.integers(-20, 20)))
            cdfs.append(cdf)
            # mostly in range, sometimes escaped
            if gen.random() < 0.1:
                symbols.append(int(gen.integers(-1000, 1000)))
            else:
                symbols.append(int(gen.integers(cdf.s_min, cdf.s_max + 1)))
        decoded, _ = _roundtrip(cdfs, symbols)
        assert decoded == symbols

    def test_zero_entropy_source(self):
        cdf = DiscreteCDF(s_min=0, s_max=0, counts=np.array([TOTAL]), escape=False)
        _, data = _roundtrip([cdf] * 5000, [0] * 5000)
        assert 8 * len(data) <= 40

    def test_uniform_alphabet_costs_eight_bits(self, rng):
        cdf = DiscreteCDF.from_probabilities(np.full(256, 1.0 / 256), escape=False)
        symbols = rng.integers(0, 256, 4096).tolist()
        decoded, data = _roundtrip([cdf] * len(symbols), symbols)
        assert decoded == symbols
        assert abs(8 * len(data) - 4096 * 8) <= 0.01 * 4096 * 8

    def test_out_of_range_without_escape(self):
        cdf = DiscreteCDF.from_probabilities([0.5, 0.5], escape=False)
        with pytest.raises(ValidationError):
            encode_symbol(RangeEncoder(), cdf, 5)

    def test_truncated_stream(self):
        cdf = DiscreteCDF.from_probabilities(np.full(16, 1.0 / 16), escape=False)
        _, data = _roundtrip([cdf] * 200, [3] * 200)
        dec = RangeDecoder(data[:10])
        with pytest.raises(DecodeError, match="offset"):
            for _ in range(200):
                decode_symbol(dec, cdf)

    def test_zigzag(self):
        for v in (0, 1, -1, 2, -2, 12345, -(1 << 31)):
            assert unzigzag(zigzag(v)) == v
        assert [zigzag(v) for v in (0, -1, 1, -2)] == [0, 1, 2, 3]


class TestGaussianTables:
    def test_zero_mean_unit_scale(self):
        p0 = norm.cdf(0.5) - norm.cdf(-0.5)
        assert p0 == pytest.approx(0.3829, abs=1e-4)
        cdf = gaussian_cdf_table(0.0, 1.0, -10, 10)
        assert cdf.probability(0) == pytest.approx(p0, abs=1e-3)

    def test_symmetry(self):
        cdf = gaussian_cdf_table(0.0, 2.0, -10, 10)
        for k in range(1, 8):
            assert abs(cdf.probability(k) - cdf.probability(-k)) <= 1.0 / TOTAL

    def test_table_set_roundtrip_with_escapes(self, rng):
        means = rng.normal(0.0, 3.0, 500)
        scales = rng.uniform(0.1, 5.0, 500)
        symbols = np.rint(means + rng.normal(0.0, 1.0, 500) * scales).astype(np.int64)
        symbols[::50] += 100
        tables = gaussian_table_set(means, scales, 8)
        np.testing.assert_array_equal(tables.decode(tables.encode(symbols)), symbols)

    def test_non_positive_scale(self):
        with pytest.raises(ValidationError):
            gaussian_table_set(np.zeros(2), np.array([1.0, 0.0]), 4)


class TestGaussianBits:
    def test_mode_costs_little(self):
        bits = gaussian_bits(Tensor(np.zeros(1)), Tensor(np.zeros(1)), Tensor(np.full(1, 0.1)), Tensor(np.full(1, 0.5)))
        assert 0.0 < bits.data[0] < 1e-3

    def test_matches_closed_form(self):
        y, mu, sigma = 1.3, 0.2, 0.7
        bits = gaussian_bits(Tensor(np.array([y])), Tensor(np.array([mu])), Tensor(np.array([sigma])), Tensor(np.array([0.5])))
        p = norm.cdf((y - mu + 0.5) / sigma) - norm.cdf((y - mu - 0.5) / sigma)
        assert bits.data[0] == pytest.approx(-math.log2(p), rel=1e-9)

    def test_finite_differences(self, rng):
        y = parameter(rng.normal(0.0, 2.0, 30))
        mu = parameter(rng.normal(0.0, 1.0, 30))
        sigma = parameter(rng.uniform(0.5, 3.0, 30))
        half = parameter(rng.uniform(0.3, 0.7, 30))

        def f():
            return tsum(gaussian_bits(y, mu, sigma, half))

        for theta in (y, mu, sigma, half):
            assert finite_diff_check(f, theta, h=1e-6) < 1e-4


class TestFactorizedPrior:
    def test_cumulative_is_monotone(self):
        prior = FactorizedPrior(3, rng=np.random.default_rng(0), dtype=np.float64)
        grid = np.broadcast_to(np.linspace(-20.0, 20.0, 81), (3, 81))
        c = prior.cumulative(grid)
        assert np.all(np.diff(c, axis=1) >= 0)
        assert np.all((c > 0) & (c < 1))

    def test_code_roundtrip(self, rng):
        prior = FactorizedPrior(3, rng=np.random.default_rng(1), dtype=np.float64)
        z = Tensor(rng.normal(0.0, 4.0, (1, 3, 2, 3)))
        data, symbols = factorized_rate_and_code(z, prior, mode="encode")
        np.testing.assert_array_equal(factorized_decode(data, prior, symbols.shape), symbols)

    def test_rate_gradients(self, rng):
        prior = FactorizedPrior(2, rng=np.random.default_rng(2), dtype=np.float64)
        z = parameter(rng.normal(0.0, 2.0, (1, 2, 2, 2)))

        def f():
            return factorized_rate_and_code(z, prior, mode="train")

        assert finite_diff_check(f, z, h=1e-6) < 1e-4
        for theta in prior.params[:3]:
            assert finite_diff_check(f, theta, h=1e-6) < 1e-4


class TestBitstream:
    def _stream(self, encoder_id=None):
        return Bitstream(2, 100, 75, b"zz", b"y1y1", b"y2", encoder_id=encoder_id)

    def test_roundtrip(self):
        bs = self._stream()
        assert Bitstream.from_bytes(bs.to_bytes()) == bs

    def test_encoder_id_roundtrip(self):
        bs = self._stream(encoder_id=3)
        back = Bitstream.from_bytes(bs.to_bytes())
        assert back.encoder_id == 3
        assert back.strip_encoder_id() == self._stream()
        assert bs.num_bytes == self._stream().num_bytes + 1

    def test_bad_magic(self):
        data = b"XXXX" + self._stream().to_bytes()[4:]
        with pytest.raises(DecodeError, match="magic"):
            Bitstream.from_bytes(data)

    def test_truncated(self):
        with pytest.raises(DecodeError):
            Bitstream.from_bytes(self._stream().to_bytes()[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(DecodeError, match="trailing"):
            Bitstream.from_bytes(self._stream().to_bytes() + b"\x00")

    def test_header_limits(self):
        with pytest.raises(ValidationError):
            Bitstream(0, 70000, 10, b"", b"", b"").to_bytes()


def _estimate_and_coded_bits(model, x, rate_index):
    """Estimated y bits on eval-mode symbols next to the bits the coder actually writes."""
    y = model.encoder.forward(Tensor(x))
    _, y_hat = quantize(y, model.quant, rate_index, mode="eval")
    step = model.quant.step_array(rate_index)
    _, z_symbols = factorized_rate_and_code(model.hyper_encoder.forward(y), model.prior, mode="encode")
    hyper = model.hyper_decoder.forward(Tensor(z_symbols.astype(model.dtype)))
    anchors = np.ascontiguousarray(np.broadcast_to(anchor_mask(*y.shape[2:]), y.shape))
    half = Tensor(np.ascontiguousarray(np.broadcast_to(0.5 * step[None, :, None, None], y.shape)).astype(model.dtype))
    p1 = entropy_params(None, model, hyper=hyper)
    p2 = entropy_params(None, model, y1_hat=Tensor((y_hat.data * anchors).astype(model.dtype)), stage=2, hyper=hyper)
    estimate = float(rate_estimate(y_hat, p1, half, anchors).data) + float(rate_estimate(y_hat, p2, half, ~anchors).data)
    bs = compress(x, model, rate_index)
    return estimate, 8.0 * (len(bs.y1_stream) + len(bs.y2_stream))


@pytest.mark.slow
class TestTrainedCodec:
    def test_rate_estimate_tracks_coded_bits(self, trained_teacher, tmp_path):
        # 256px images keep the fixed flush bytes of each stream well under 1% of the total
        finest = int(np.argmin(trained_teacher.quant.log_global.data))
        estimated = coded = 0.0
        for path in write_toy_corpus(tmp_path, 4, size=256, seed=5):
            x = to_batch(read_image(path), np.float64)
            est, bits = _estimate_and_coded_bits(trained_teacher, x, finest)
            estimated += est
            coded += bits
        assert abs(estimated - coded) / coded < 0.03

    def test_symbols_survive_the_coder(self, trained_teacher, toy_corpus):
        x = to_batch(read_image(toy_corpus.eval_paths[0]), np.float64)
        for rate_index in range(trained_teacher.quant.num_rates):
            symbols, _ = quantize(trained_teacher.encoder.forward(Tensor(x)), trained_teacher.quant, rate_index)
            bs = Bitstream.from_bytes(compress(x, trained_teacher, rate_index).to_bytes())
            np.testing.assert_array_equal(decode_symbols(bs, trained_teacher), symbols)
