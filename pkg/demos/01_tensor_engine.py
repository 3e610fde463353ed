"""Reverse-mode gradients on numpy arrays, verified by central differences.

Builds a two-layer network on the tensor engine, backpropagates a scalar
loss, and compares the analytic gradients with finite differences.
"""

import numpy as np

from starhit import numerics as nx

rng = np.random.default_rng(0)
store = nx.ParamStore(np.float64)
store.add("W1", rng.normal(0, 0.5, (4, 6)))
store.add("b1", np.zeros(6))
store.add("W2", rng.normal(0, 0.5, (6, 3)))

x = nx.Tensor(rng.normal(size=(5, 4)))


def loss_fn(s):
    hidden = nx.tanh(x @ s["W1"] + s["b1"])
    probs = nx.softmax(hidden @ s["W2"], axis=-1)
    return nx.scale(nx.sum(nx.log(probs[:, 0])), -1.0)


loss = loss_fn(store)
nx.backward(loss, store)
print(f"loss = {loss.item():.6f}")
print("dL/dW2 =\n", np.round(store.grad("W2"), 4))

report = nx.fd_check(loss_fn, store, epsilon=1e-6)
print(f"finite-difference check: max relative error {report.max_rel_err:.2e} "
      f"over {report.n_checked} coordinates -> {'ok' if report.passed else 'FAILED'}")

# non-finite values are rejected at the op that produced them
try:
    nx.log(nx.Tensor(np.array([0.0, 1.0])))
except nx.NumericsError as exc:
    print("caught:", exc)
