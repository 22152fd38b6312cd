import numpy as np
import pytest

from splathead import autodiff as ad
from splathead.errors import NumericalError, ValidationError


def scalarize(t):
    return ad.mean(t) if t.data.shape != () else t


class TestBasics:
    def test_square_derivative(self):
        tape = ad.Tape()
        x = tape.leaf(np.array(3.0))
        y = ad.mul(x, x)
        tape.backward(y)
        assert tape.grad(x) == pytest.approx(6.0)

    def test_constant_loss_zero_grads(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones((4,)))
        c = tape.leaf(np.array(2.0))
        loss = ad.mul(c, c)
        tape.backward(loss)
        assert np.all(tape.grad(x) == 0.0)

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones((4,)))
        with pytest.raises(ValidationError):
            tape.backward(ad.mul(x, x))

    def test_shape_mismatch_names_both_shapes(self):
        tape = ad.Tape()
        a = tape.leaf(np.ones((3, 4)))
        b = tape.leaf(np.ones((5,)))
        with pytest.raises(ValidationError) as e:
            ad.add(a, b)
        assert "(3, 4)" in str(e.value) and "(5,)" in str(e.value)

    def test_nan_propagation_is_error(self):
        tape = ad.Tape()
        x = tape.leaf(np.array(-1.0))
        with pytest.raises(NumericalError):
            ad.log(x)

    def test_softmax_normalizes(self):
        rng = np.random.default_rng(0)
        tape = ad.Tape()
        x = tape.leaf(rng.standard_normal((6, 9)) * 5)
        y = ad.softmax(x, axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_accumulation_equals_sum_of_separate_backwards(self):
        rng = np.random.default_rng(1)
        p = rng.standard_normal((5,)).astype(np.float32)
        a_arr = rng.standard_normal((5,)).astype(np.float32)
        b_arr = rng.standard_normal((5,)).astype(np.float32)

        def one(coef):
            tape = ad.Tape()
            x = tape.leaf(p)
            loss = ad.sum_(ad.mul(x, tape.leaf(coef)))
            tape.backward(loss)
            return tape.grad(x)

        tape = ad.Tape()
        x = tape.leaf(p)
        loss = ad.add(ad.sum_(ad.mul(x, tape.leaf(a_arr))),
                      ad.sum_(ad.mul(x, tape.leaf(b_arr))))
        tape.backward(loss)
        np.testing.assert_allclose(tape.grad(x), one(a_arr) + one(b_arr),
                                   atol=1e-6)

    def test_determinism(self):
        rng = np.random.default_rng(2)
        p = rng.standard_normal((8, 8)).astype(np.float32)

        def run():
            tape = ad.Tape()
            x = tape.leaf(p)
            loss = ad.mean(ad.gelu(ad.matmul(x, ad.transpose(x))))
            tape.backward(loss)
            return loss.data.copy(), tape.grad(x).copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestMatmulFD:
    def test_matmul_grad_matches_central_differences(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        w = rng.standard_normal((4, 3))

        tape = ad.Tape()
        ta, tb = tape.leaf(a), tape.leaf(b)
        loss = ad.sum_(ad.mul(ad.matmul(ta, tb), tape.leaf(w)))
        tape.backward(loss)

        # float64 central-difference oracle of the same scalar function
        def fd(arr, other, left):
            g = np.zeros_like(arr)
            flat = g.reshape(-1)
            src = arr.reshape(-1)
            for i in range(src.size):
                for s, sign in ((1e-3, 1.0), (-1e-3, -1.0)):
                    src[i] += s
                    v = np.sum(((arr @ other) if left else (other @ arr)) * w)
                    flat[i] += sign * v / 2e-3
                    src[i] -= s
            return g

        for got, want in ((tape.grad(ta), fd(a, b, True)),
                          (tape.grad(tb), fd(b, a, False))):
            rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-8)
            assert np.max(rel) < 1e-4


def primitive_cases(rng):
    """(name, builder, params) for every registered primitive."""
    n, m = 3, 4
    a = rng.standard_normal((n, m))
    b = rng.standard_normal((n, m))
    pos = rng.uniform(0.5, 2.0, (n, m))
    bias = rng.standard_normal((m,))
    mat2 = rng.standard_normal((m, 2))
    img = rng.standard_normal((2, 3, 6, 6)) * 0.5
    ker = rng.standard_normal((4, 3, 3, 3)) * 0.5
    table = rng.standard_normal((5, 3))
    row = rng.standard_normal((1, 4))
    return [
        ("add", lambda t, p: scalarize(ad.mul(ad.add(p[0], p[1]), p[0])), [a, b]),
        ("add_bias", lambda t, p: scalarize(ad.mul(ad.add(p[0], p[1]), p[0])),
         [a, bias]),
        ("sub", lambda t, p: scalarize(ad.mul(ad.sub(p[0], p[1]), p[1])), [a, b]),
        ("mul", lambda t, p: scalarize(ad.mul(p[0], p[1])), [a, b]),
        ("div", lambda t, p: scalarize(ad.div(p[0], p[1])), [a, pos]),
        ("matmul", lambda t, p: scalarize(ad.matmul(p[0], p[1])), [a, mat2]),
        ("reshape", lambda t, p: scalarize(ad.mul(ad.reshape(p[0], (m, n)),
                                                  ad.reshape(p[1], (m, n)))),
         [a, b]),
        ("transpose", lambda t, p: scalarize(ad.matmul(ad.transpose(p[0]), p[0])),
         [a]),
        ("concat", lambda t, p: scalarize(ad.mul(ad.concat([p[0], p[1]], axis=0),
                                                 ad.concat([p[1], p[0]], axis=0))),
         [a, b]),
        ("slice", lambda t, p: scalarize(ad.mul(ad.slice_(p[0], np.s_[1:, :2]),
                                                ad.slice_(p[1], np.s_[:2, 1:3]))),
         [a, b]),
        ("mean_axis", lambda t, p: scalarize(ad.mean(p[0], axis=0)), [a]),
        ("sum_axis", lambda t, p: scalarize(ad.sum_(p[0], axis=1)), [a]),
        ("relu", lambda t, p: scalarize(ad.relu(p[0])), [a + 0.05]),
        ("gelu", lambda t, p: scalarize(ad.gelu(p[0])), [a]),
        ("logistic", lambda t, p: scalarize(ad.logistic(p[0])), [a]),
        ("tanh", lambda t, p: scalarize(ad.tanh(p[0])), [a]),
        ("exp", lambda t, p: scalarize(ad.exp(p[0])), [a]),
        ("log", lambda t, p: scalarize(ad.log(p[0])), [pos]),
        ("sqrt", lambda t, p: scalarize(ad.sqrt(p[0])), [pos]),
        ("softmax", lambda t, p: scalarize(ad.mul(ad.softmax(p[0], axis=1), p[1])),
         [a, b]),
        ("layer_norm", lambda t, p: scalarize(ad.mul(ad.layer_norm(p[0], axis=-1),
                                                     p[1])), [a * 2, b]),
        ("embedding", lambda t, p: scalarize(
            ad.embedding_lookup(p[0], np.array([0, 2, 2, 4]))), [table]),
        ("huber", lambda t, p: scalarize(ad.huber(p[0], delta=1.0)), [a * 2]),
        ("repeat_rows", lambda t, p: scalarize(ad.mul(ad.repeat_rows(p[0], n),
                                                      p[1])), [row,
                                                               rng.standard_normal((n, 4))]),
        ("conv2d", lambda t, p: scalarize(ad.conv2d(p[0], p[1], stride=1, pad=1)),
         [img, ker]),
        ("conv2d_stride", lambda t, p: scalarize(ad.conv2d(p[0], p[1], stride=2,
                                                           pad=0)), [img, ker]),
        ("upsample2d", lambda t, p: scalarize(ad.mul(ad.upsample2d(p[0]), p[1])),
         [img, rng.standard_normal((2, 3, 12, 12))]),
    ]


class TestEveryPrimitive:
    @pytest.mark.parametrize("seed", range(20))
    def test_all_primitives_pass_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        for name, fn, params in primitive_cases(rng):
            report = ad.grad_check(fn, [p.copy() for p in params],
                                   eps=1e-3, tol=1e-3, max_coords=12,
                                   seed=seed)
            assert report["passed"], (name, report["failures"][:3])


class TestGradCheck:
    def test_quadratic_bowl_exact(self):
        def fn(tape, p):
            return ad.sum_(ad.mul(p[0], p[0]))
        report = ad.grad_check(fn, [np.array([1.0, -2.0, 0.5])], eps=1e-3)
        assert report["max_rel_err"] < 1e-4

    def test_layer_norm_composite(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 6))

        def fn(tape, p):
            h = ad.layer_norm(ad.matmul(p[0], p[1]), axis=-1)
            return ad.mean(ad.gelu(h))
        assert ad.grad_check(fn, [x, w], tol=1e-3)["passed"]

    def test_corrupted_backward_reported(self):
        # negative control: a deliberately wrong vjp must be flagged
        def bad_double(a):
            out = a.data * 2.0

            def vjp(g):
                return (g * 3.0,)
            return a.tape._record(out, (a.idx,), vjp)

        def fn(tape, p):
            return ad.sum_(bad_double(p[0]))
        report = ad.grad_check(fn, [np.array([1.0, 2.0])])
        assert not report["passed"]
        assert len(report["failures"]) == 2


class TestTwoLayerMLP:
    def test_all_parameter_grads_match_fd(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((6, 5)).astype(np.float32)
        y = rng.standard_normal((6, 2)).astype(np.float32)
        w1 = rng.standard_normal((5, 8)) * 0.5
        b1 = rng.standard_normal((8,)) * 0.1
        w2 = rng.standard_normal((8, 2)) * 0.5
        b2 = rng.standard_normal((2,)) * 0.1

        def fn(tape, p):
            h = ad.gelu(ad.add(ad.matmul(tape.leaf(x), p[0]), p[1]))
            out = ad.add(ad.matmul(h, p[2]), p[3])
            d = ad.sub(out, tape.leaf(y))
            return ad.mean(ad.mul(d, d))

        report = ad.grad_check(fn, [w1, b1, w2, b2], eps=1e-3, tol=1e-3)
        assert report["passed"], report["failures"][:5]
