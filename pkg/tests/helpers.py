import numpy as np

from nrsfm import autodiff as ad


def central_difference(fn, arrays, h=1e-6):
    """Finite-difference gradients of scalar ``fn()`` w.r.t. arrays modified in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = fn()
            arr[idx] = old - h
            down = fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(build, leaves, rtol=1e-4, atol=1e-8, h=1e-6):
    """Compare tape gradients of ``build()`` with central differences."""
    with ad.Tape() as tape:
        loss = build()
    analytic = tape.backward(loss, leaves)
    numeric = central_difference(lambda: build().item(), [leaf.data for leaf in leaves], h)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


# criterion number -> (passed, detail); printed at the end of the session
CRITERIA = {}


def record(number, passed, detail):
    """Store and print one acceptance verdict, then fail the test if it did not pass."""
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, f"criterion {number}: {detail}"
