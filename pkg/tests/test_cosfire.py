"""Keypoint-constellation filters: configuration, application, banks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapehash import cosfire, dog
from shapehash.errors import (
    DataError,
    FilterConfigurationError,
    FormatVersionError,
    ZeroVectorError,
)


def _gaussian_blob(size, cx, cy, sigma=2.5, amplitude=1.0):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


def _two_blob_prototype(size=71, rho=25.0):
    c = (size - 1) // 2
    img = _gaussian_blob(size, c + rho, c) + _gaussian_blob(size, c - rho, c)
    return img, (float(c), float(c))


def _filter_response_oracle(img, flt):
    """Recompute the response from the definition: per keypoint threshold,
    blur, shift with an explicit loop, then an n-th-root product."""
    hp = flt.hyperparams
    kps = flt.oriented_keypoints()
    n = len(kps)
    factors = []
    for kp in kps:
        raw = dog.dog_response_map(img, dog.DogParams(kp.sigma, kp.polarity))
        blurred = dog.gaussian_blur(
            dog.threshold_map(raw, hp.t1), hp.sigma0_blur + hp.alpha_blur * kp.rho
        )
        dx = int(np.rint(-kp.rho * np.cos(kp.phi)))
        dy = int(np.rint(-kp.rho * np.sin(kp.phi)))
        h, w = blurred.shape
        shifted = np.zeros_like(blurred)
        for y in range(h):
            for x in range(w):
                sy, sx = y - dy, x - dx
                if 0 <= sy < h and 0 <= sx < w:
                    shifted[y, x] = blurred[sy, sx]
        factors.append(shifted)
    if n == 1:
        return factors[0]
    out = np.ones_like(factors[0])
    for f in factors:
        out = out * np.power(f, 1.0 / n)
    return out


def _circle_scan_oracle(img, center, hp, rho):
    """Exhaustive scan of the sampled circular profile: for each of the 360
    angles decide local-maximum status and the winning (sigma, polarity) by
    direct comparison."""
    cx, cy = center
    pairs = [(s, pol) for s in sorted(hp.sigma_bank) for pol in ("on", "off")]
    maps = [
        dog.threshold_map(dog.dog_response_map(img, dog.DogParams(s, pol)), hp.t1)
        for s, pol in pairs
    ]
    angles = 2 * np.pi * np.arange(360) / 360
    sampled = np.stack(
        [
            cosfire._bilinear_sample(m, cx + rho * np.cos(angles), cy + rho * np.sin(angles))
            for m in maps
        ]
    )
    profile = sampled.max(axis=0)
    peak = profile.max()
    tuples = []
    for a in range(360):
        here = profile[a]
        if here <= profile[(a - 1) % 360] or here <= profile[(a + 1) % 360]:
            continue
        if here < hp.t1 * peak:
            continue
        sigma, polarity = pairs[int(sampled[:, a].argmax())]
        tuples.append((rho, angles[a], sigma, polarity))
    return tuples


class TestConfigure:
    def test_two_blob_prototype_keypoints(self):
        # with the surround artifacts below the suppression fraction the
        # prototype yields exactly its two blob directions
        img, center = _two_blob_prototype(rho=25.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0, 25.0), t1=0.2)
        flt = cosfire.configure_filter(img, center, hp)
        assert len(flt) == 2
        rhos = sorted(kp.rho for kp in flt.keypoints)
        assert rhos == [25.0, 25.0]
        phis = sorted(kp.phi for kp in flt.keypoints)
        np.testing.assert_allclose(phis[0], 0.0, atol=2 * np.pi / 360)
        np.testing.assert_allclose(phis[1], np.pi, atol=2 * np.pi / 360)
        assert all(kp.polarity == "on" for kp in flt.keypoints)
        assert all(kp.sigma == 3.0 for kp in flt.keypoints)

    def test_matches_circle_scan_oracle(self):
        img, center = _two_blob_prototype(rho=25.0)
        for t1 in (0.1, 0.2):
            hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(25.0,), t1=t1)
            flt = cosfire.configure_filter(img, center, hp)
            got = [
                (kp.rho, kp.phi, kp.sigma, kp.polarity) for kp in flt.keypoints
            ]
            expected = _circle_scan_oracle(img, center, hp, 25.0)
            assert len(got) == len(expected)
            for g, e in zip(sorted(got), sorted(expected)):
                np.testing.assert_allclose(g[:3], e[:3], rtol=0, atol=1e-12)
                assert g[3] == e[3]

    def test_center_keypoint_from_central_blob(self):
        size = 41
        c = (size - 1) // 2
        img = _gaussian_blob(size, c, c, sigma=3.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0,))
        flt = cosfire.configure_filter(img, (float(c), float(c)), hp)
        assert len(flt) == 1
        kp = flt.keypoints[0]
        assert kp.rho == 0.0 and kp.phi == 0.0

    def test_blank_prototype_rejected(self):
        hp = cosfire.CosfireHyperparams()
        with pytest.raises(FilterConfigurationError):
            cosfire.configure_filter(np.zeros((41, 41)), (20.0, 20.0), hp)

    def test_center_outside_image(self):
        hp = cosfire.CosfireHyperparams()
        with pytest.raises(ValueError):
            cosfire.configure_filter(np.ones((10, 10)), (40.0, 5.0), hp)

    def test_weak_maxima_suppressed(self):
        # a faint third blob under t1-fraction of the circle peak is ignored
        img, center = _two_blob_prototype(rho=20.0)
        cx, cy = center
        img = img + _gaussian_blob(img.shape[0], cx, cy + 20.0, amplitude=0.002)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(20.0,), t1=0.2)
        flt = cosfire.configure_filter(img, center, hp)
        assert len(flt) == 2


class TestApply:
    def test_matches_definition_oracle(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0, 12.0))
        flt = cosfire.configure_filter(img, center, hp)
        got = cosfire.filter_response_map(img, flt)
        oracle = _filter_response_oracle(img, flt)
        np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)

    def test_single_keypoint_passthrough(self):
        img, _ = _two_blob_prototype(size=41, rho=12.0)
        kp = cosfire.CosfireKeypoint(0.0, 0.0, 3.0, "on")
        flt = cosfire.CosfireFilter((kp,), cosfire.CosfireHyperparams())
        got = cosfire.filter_response_map(img, flt)
        oracle = _filter_response_oracle(img, flt)
        np.testing.assert_array_equal(got, oracle)

    def test_response_peaks_at_configured_center(self):
        img, center = _two_blob_prototype(rho=25.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(25.0,))
        flt = cosfire.configure_filter(img, center, hp)
        response = cosfire.filter_response_map(img, flt)
        peak_y, peak_x = np.unravel_index(response.argmax(), response.shape)
        assert abs(peak_x - center[0]) <= 2 and abs(peak_y - center[1]) <= 2

    def test_rotated_filter_matches_oracle(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(12.0,))
        flt = cosfire.rotate_filter(cosfire.configure_filter(img, center, hp), 0.7)
        got = cosfire.filter_response_map(img, flt)
        oracle = _filter_response_oracle(img, flt)
        np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)

    def test_shared_cache_identical(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0, 12.0))
        flt = cosfire.configure_filter(img, center, hp)
        orientations = cosfire.default_orientations(4)
        cached = cosfire.ResponseCache(img)
        with_cache = cosfire.rotation_tolerant_response(img, flt, orientations, cached)
        without = cosfire.rotation_tolerant_response(img, flt, orientations)
        np.testing.assert_array_equal(with_cache, without)

    def test_rotation_tolerant_is_pointwise_max(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(12.0,))
        flt = cosfire.configure_filter(img, center, hp)
        orientations = cosfire.default_orientations(3)
        singles = [
            cosfire.filter_response_map(img, cosfire.rotate_filter(flt, psi))
            for psi in orientations
        ]
        combined = cosfire.rotation_tolerant_response(img, flt, orientations)
        np.testing.assert_array_equal(combined, np.max(singles, axis=0))


class TestRotation:
    def test_full_turn_identity(self):
        img, center = _two_blob_prototype(size=41, rho=7.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(7.0,))
        flt = cosfire.configure_filter(img, center, hp)
        base = cosfire.filter_response_map(img, flt)
        turned = cosfire.filter_response_map(img, cosfire.rotate_filter(flt, 2 * np.pi))
        np.testing.assert_allclose(turned, base, rtol=0, atol=1e-12)

    @given(
        st.floats(min_value=-10.0, max_value=10.0),
        st.floats(min_value=-10.0, max_value=10.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_composition_exact(self, a, b):
        kp = cosfire.CosfireKeypoint(5.0, 0.3, 3.0, "on")
        flt = cosfire.CosfireFilter((kp,), cosfire.CosfireHyperparams())
        two_step = cosfire.rotate_filter(cosfire.rotate_filter(flt, a), b)
        one_step = cosfire.rotate_filter(flt, a + b)
        assert two_step.rotation == one_step.rotation

    def test_oriented_keypoints_fold_modulo(self):
        kp = cosfire.CosfireKeypoint(5.0, 0.3, 3.0, "on")
        flt = cosfire.rotate_filter(
            cosfire.CosfireFilter((kp,), cosfire.CosfireHyperparams()), 2 * np.pi + 0.5
        )
        (oriented,) = flt.oriented_keypoints()
        np.testing.assert_allclose(oriented.phi, 0.8, atol=1e-12)
        assert 0.0 <= oriented.phi < 2 * np.pi


class TestNormalize:
    def test_unit_norm(self):
        out = cosfire.l2_normalize(np.array([3.0, 4.0]))
        np.testing.assert_allclose(out, [0.6, 0.8], rtol=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ZeroVectorError):
            cosfire.l2_normalize(np.zeros(4))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            cosfire.l2_normalize(np.array([1.0, np.nan]))

    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
            min_size=1,
            max_size=16,
        ).filter(lambda v: max(abs(x) for x in v) > 1e-3)
    )
    @settings(max_examples=60, deadline=None)
    def test_norm_is_one(self, values):
        out = cosfire.l2_normalize(np.array(values))
        np.testing.assert_allclose(np.linalg.norm(out), 1.0, rtol=1e-9)


class TestBilinear:
    def test_exact_on_grid_points(self):
        grid = np.arange(12, dtype=np.float64).reshape(3, 4)
        xs = np.array([0.0, 3.0, 1.0])
        ys = np.array([0.0, 2.0, 1.0])
        np.testing.assert_allclose(
            cosfire._bilinear_sample(grid, xs, ys), [0.0, 11.0, 5.0]
        )

    def test_midpoint_average(self):
        grid = np.array([[0.0, 2.0], [4.0, 6.0]])
        out = cosfire._bilinear_sample(grid, np.array([0.5]), np.array([0.5]))
        np.testing.assert_allclose(out, [3.0])

    def test_outside_is_zero(self):
        grid = np.ones((3, 3))
        xs = np.array([-0.1, 3.5, 1.0])
        ys = np.array([1.0, 1.0, -2.0])
        np.testing.assert_array_equal(
            cosfire._bilinear_sample(grid, xs, ys), [0.0, 0.0, 0.0]
        )


class TestDescriptor:
    def test_unit_norm_and_deterministic(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0, 12.0))
        flt = cosfire.configure_filter(img, center, hp)
        bank = cosfire.FilterBank((flt, flt), cosfire.default_orientations(4))
        d1 = cosfire.compute_descriptor(img, bank)
        d2 = cosfire.compute_descriptor(img, bank)
        assert d1.shape == (2,)
        np.testing.assert_allclose(np.linalg.norm(d1), 1.0, rtol=1e-12)
        np.testing.assert_array_equal(d1, d2)

    def test_blank_image_zero_descriptor(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(12.0,))
        flt = cosfire.configure_filter(img, center, hp)
        bank = cosfire.FilterBank((flt,), cosfire.default_orientations(4))
        with pytest.raises(ZeroVectorError):
            cosfire.compute_descriptor(np.zeros((41, 41)), bank)

    def test_descriptor_entries_are_response_maxima(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0, 12.0))
        flt = cosfire.configure_filter(img, center, hp)
        orientations = cosfire.default_orientations(4)
        bank = cosfire.FilterBank((flt,), orientations)
        d = cosfire.compute_descriptor(img, bank)
        raw = cosfire.rotation_tolerant_response(img, flt, orientations).max()
        np.testing.assert_allclose(d, [1.0])
        assert raw > 0


class TestOrientations:
    def test_default_spacing(self):
        orientations = cosfire.default_orientations(12)
        assert len(orientations) == 12
        assert orientations[0] == 0.0
        np.testing.assert_allclose(np.diff(orientations), 2 * np.pi / 12)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            cosfire.default_orientations(0)


class TestBankSerialization:
    def _bank(self):
        img, center = _two_blob_prototype(size=41, rho=12.0)
        hp = cosfire.CosfireHyperparams(sigma_bank=(3.0,), radii=(0.0, 12.0))
        flt = cosfire.configure_filter(img, center, hp)
        return cosfire.FilterBank(
            (flt, cosfire.rotate_filter(flt, 0.4)),
            cosfire.default_orientations(4),
            ("FRI", "FRII"),
        ), img

    def test_roundtrip(self, tmp_path):
        bank, img = self._bank()
        path = tmp_path / "bank.json"
        cosfire.save_bank(path, bank)
        back = cosfire.load_bank(path)
        assert back.orientations == bank.orientations
        assert back.labels == bank.labels
        assert len(back) == len(bank)
        for orig, loaded in zip(bank.filters, back.filters):
            assert loaded.hyperparams == orig.hyperparams
            for okp, lkp in zip(orig.oriented_keypoints(), loaded.keypoints):
                np.testing.assert_allclose(
                    (lkp.rho, lkp.phi, lkp.sigma), (okp.rho, okp.phi, okp.sigma)
                )
                assert lkp.polarity == okp.polarity

    def test_roundtrip_preserves_responses(self, tmp_path):
        bank, img = self._bank()
        path = tmp_path / "bank.json"
        cosfire.save_bank(path, bank)
        back = cosfire.load_bank(path)
        d1 = cosfire.compute_descriptor(img, bank)
        d2 = cosfire.compute_descriptor(img, back)
        np.testing.assert_allclose(d1, d2, rtol=0, atol=1e-12)

    def test_deterministic_bytes(self, tmp_path):
        bank, _ = self._bank()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        cosfire.save_bank(a, bank)
        cosfire.save_bank(b, bank)
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_format_tag(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text('{"format": "something-else/9", "filters": []}')
        with pytest.raises(FormatVersionError):
            cosfire.load_bank(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            cosfire.load_bank(path)

    def test_malformed_tuples(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text(
            '{"format": "cosfire-bank/1", "orientations": [0.0],'
            ' "filters": [{"hyperparams": {"sigma_bank": [3.0], "radii": [1.0],'
            ' "t1": 0.1, "sigma0_blur": 2.0, "alpha_blur": 0.1},'
            ' "tuples": [[1.0, 0.0]]}]}'
        )
        with pytest.raises(DataError):
            cosfire.load_bank(path)
