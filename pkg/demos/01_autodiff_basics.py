"""
Building and differentiating a small graph
==========================================

A graph is a list of nodes in topological order. Inputs are bound at
``forward`` time, parameters carry their own values, and ``backward``
returns a gradient for every parameter.
"""

import numpy as np

from textmatch.autodiff import Graph, Parameter, backward, forward, grad_check

rng = np.random.default_rng(0)

# a one-hidden-layer network scoring four 3-dimensional points
g = Graph()
x = g.input("x", (4, 3))
W1 = g.parameter(Parameter("W1", rng.normal(scale=0.5, size=(3, 5))))
b1 = g.parameter(Parameter("b1", np.zeros(5)))
w2 = g.parameter(Parameter("w2", rng.normal(scale=0.5, size=(5, 1))))
hidden = g.tanh(g.add(g.matmul(x, W1), b1))
score = g.reshape(g.matmul(hidden, w2), (4,))

# squared error against fixed targets
y = g.constant([1.0, 0.0, -1.0, 0.5])
diff = g.sub(score, y)
loss = g.mean(g.mul(diff, diff))

bind = {"x": rng.normal(size=(4, 3))}
values = forward(g, bind)
print("scores:", np.round(values[score], 4))
print("loss:  ", round(float(values[loss]), 6))

grads = backward(g, loss, values)
for name, grad in grads.items():
    print(f"d loss / d {name}: shape {grad.shape}, norm {np.linalg.norm(grad):.4f}")

# central finite differences agree with the analytic gradient
report = grad_check(g, loss, bind)
print(f"gradient check worst relative error: {report.worst:.2e} (passed: {report.passed})")

# a few plain gradient steps
for step in range(50):
    values = forward(g, bind)
    grads = backward(g, loss, values)
    for p in g.parameters():
        p.value = p.value - 0.1 * grads[p.name]
print("loss after 50 steps:", round(float(forward(g, bind)[loss]), 6))
