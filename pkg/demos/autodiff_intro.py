"""Walk through the autodiff tape: record, replay, check.

Run with:  PYTHONPATH=src python3 demos/autodiff_intro.py
"""

import numpy as np

from danse import autodiff as ad
from danse.autodiff import Tape, Tensor, grad_check


def main() -> None:
    # 1. A tensor is a numpy array plus a gradient slot. Nothing happens
    #    until a tape is open; outside a tape the ops are plain numpy.
    w = Tensor(np.array([[0.5, -1.0], [2.0, 0.25]]), requires_grad=True)
    x = Tensor(np.array([[1.0], [3.0]]))

    y = ad.matmul(w, x)
    print("matmul outside a tape:", y.data.ravel(), "grad recorded:", y.requires_grad)

    # 2. Open a tape, build a scalar, run backward. Gradients accumulate
    #    into .grad on every tensor that asked for them.
    with Tape() as tape:
        h = ad.tanh(ad.matmul(w, x))
        loss = ad.tsum(ad.mul(h, h))
        tape.backward(loss)
    print("loss:", float(loss.data))
    print("dloss/dw:\n", w.grad)

    # 3. grad_check compares the tape against central differences.
    def f() -> Tensor:
        return ad.tsum(ad.mul(ad.tanh(ad.matmul(w, x)), ad.tanh(ad.matmul(w, x))))

    err = grad_check(f, [w], step=1e-5)
    print(f"grad_check max relative error: {err:.2e}")

    # 4. The gradient reversal op: identity forward, -lam * upstream backward.
    #    This is the whole trick that lets one backward pass train the
    #    extractor against the domain discriminator.
    v = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    with Tape() as tape:
        flipped = ad.grad_reverse(v, lam=3.0)
        s = ad.tsum(flipped)
        tape.backward(s)
    print("forward unchanged:", np.array_equal(flipped.data, v.data))
    print("backward is -lam * ones:", v.grad)


if __name__ == "__main__":
    main()
