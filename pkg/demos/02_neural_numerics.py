"""
Neural numerics: layers, losses, Adam, gradient checking
========================================================

The embedding models run on a small float64 backprop kernel: named 2-D
parameter buffers, affine and LSTM layers, two losses, and Adam. Everything
here is checkable against central finite differences, which is how the whole
stack stays trustworthy without a framework underneath.
"""

import numpy as np

from miverify.neuralnet import (
    AdamState,
    ParameterSet,
    adam_step,
    affine_backward,
    affine_forward,
    finite_diff_grad_check,
    hinge_rank_loss,
    lstm_batch_forward,
    mse_loss,
)

rng = np.random.default_rng(7)

# A two-layer regression fitted with Adam. Parameters live in a ParameterSet:
# every buffer is 2-D (biases are (1, d) rows) and draws a Xavier init from
# the set's own rng unless told otherwise.
params = ParameterSet(seed=0)
params.add("w1", 5, 16)
params.add("b1", 1, 16, init="zeros")
params.add("w2", 16, 1)
params.add("b2", 1, 1, init="zeros")

x = rng.normal(size=(200, 5))
y = np.sin(x.sum(axis=1, keepdims=True))


def loss_fn():
    h, cache1 = affine_forward(x, params.value("w1"), params.value("b1"), "relu")
    out, cache2 = affine_forward(h, params.value("w2"), params.value("b2"), "linear")
    loss, dout = mse_loss(out, y)
    dh, dw2, db2 = affine_backward(dout, cache2)
    _, dw1, db1 = affine_backward(dh, cache1)
    params.add_grad("w1", dw1)
    params.add_grad("b1", db1)
    params.add_grad("w2", dw2)
    params.add_grad("b2", db2)
    return loss


adam = AdamState(params, lr=1e-2)
for step in range(301):
    params.zero_grads()
    loss = loss_fn()
    adam_step(params, adam)
    if step % 100 == 0:
        print(f"step {step:3d}  mse {loss:.4f}")

# The analytic gradients agree with central differences to float64 noise.
err = finite_diff_grad_check(loss_fn, params)
print(f"max relative gradient error: {err:.2e}")

# The LSTM consumes a padded batch plus true lengths and returns each row's
# last valid hidden state; steps past a sequence's end change nothing.
lstm = ParameterSet(seed=1)
e, hdim = 4, 6
lstm.add("w_x", e, 4 * hdim)
lstm.add("w_h", hdim, 4 * hdim)
lstm.add("b", 1, 4 * hdim, init="zeros")
seq = rng.normal(size=(3, 5, e))
lengths = np.array([5, 2, 4])
h_last, _ = lstm_batch_forward(
    seq, lengths, lstm.value("w_x"), lstm.value("w_h"), lstm.value("b")
)
print(f"last hidden states shape: {h_last.shape}")

shorter = seq.copy()
shorter[1, 2:] = 99.0  # garbage past row 1's length must not matter
h_again, _ = lstm_batch_forward(
    shorter, lengths, lstm.value("w_x"), lstm.value("w_h"), lstm.value("b")
)
print(f"padding ignored: {np.array_equal(h_last, h_again)}")

# The pairwise ranking hinge: active when a mismatched pair scores within the
# margin of the matched pair, silent otherwise.
loss, d_pos, d_neg = hinge_rank_loss(s_pos=0.9, s_neg=0.2, margin=0.2)
print(f"easy pair: loss {loss:.3f}, d_pos {d_pos:.1f}")
loss, d_pos, d_neg = hinge_rank_loss(s_pos=0.5, s_neg=0.5, margin=0.2)
print(f"tied pair: loss {loss:.3f}, d_pos {d_pos:.1f}, d_neg {d_neg:.1f}")
