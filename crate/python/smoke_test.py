"""Smoke test for the sgntk Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/py
Then run:                 python python/smoke_test.py
"""

import math

import numpy as np

import sgntk


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print(f"ok   {msg}")


def main():
    erf2 = sgntk.Activation.erf(2.0)
    check(abs(erf2(0.3) - math.erf(0.6)) < 1e-15, "erf_2 activation evaluates erf(2z)")
    check(str(sgntk.Activation("erf:m=2")) == "erf:m=2", "activations parse from strings")
    derf = sgntk.Surrogate("derf")
    check(abs(derf(0.0) - 2 / math.sqrt(math.pi)) < 1e-15, "erf' surrogate at zero")

    xs, ys = sgntk.sphere_dataset(15, seed=0)
    check(len(xs) == 15 and all(abs(np.hypot(*x) - 1) < 1e-12 for x in xs), "sphere dataset on the unit circle")

    ntk = sgntk.Kernel("ntk", 3, erf2)
    k = np.array(ntk.gram(xs, xs))
    check(np.allclose(k, k.T) and np.linalg.eigvalsh(k).min() > 0, "NTK Gram is symmetric positive definite")

    sign_ntk = sgntk.Kernel("ntk", 3, "sign", mode="sign")
    check(math.isinf(sign_ntk(xs[0], xs[0])), "sign-limit NTK diverges on the diagonal")

    net = sgntk.Network([2, 64, 64, 1], erf2, seed=1)
    jac = np.array(net.jacobian([0.6, 0.8]))
    check(jac.shape == (1, net.parameter_count), "Jacobian has one column per parameter")
    emp = np.array(net.kernel([[0.6, 0.8]], [[0.6, 0.8]]))
    check(abs(emp[0, 0] - (jac @ jac.T)[0, 0]) < 1e-10, "empirical kernel equals J Jᵀ")

    targets = [[y] for y in ys]
    trace = net.train(xs, targets, eta=0.1 / 15, steps=200, record_kernel_every=50)
    check(trace["loss"][-1] < trace["loss"][0], "training reduces the loss")
    check(trace["drift"][0] == (0, 0.0), "kernel drift starts at zero")

    gp = sgntk.GpPosterior(sgntk.Kernel("sgntk", 3, "sign", surrogate=derf), xs, targets)
    mean, std = gp.predict(xs)
    check(np.allclose([m[0] for m in mean], ys, atol=1e-8), "SG-NTK posterior interpolates the training targets")

    labels = [1.0 if y >= 0 else -1.0 for y in ys]
    pred = [sgntk.nw_classify(sign_ntk, xs, labels, x) for x in xs]
    check(pred == [int(l) for l in labels], "Nadaraya-Watson classifier recovers training labels")

    alpha = sgntk.singular_exponent(3)
    check(abs(alpha - 0.75) < 0.05 * 0.75, f"singular exponent at depth 3 is {alpha:.4f}")

    try:
        sgntk.Kernel("sgntk", 3, "sign")
    except sgntk.SgntkError:
        print("ok   missing surrogate raises SgntkError")
    else:
        raise AssertionError("expected SgntkError")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
