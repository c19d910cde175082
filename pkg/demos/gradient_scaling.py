"""Why the agreement sum carries a 1/n factor: gradient magnitudes.

The pairwise sum alone has activation gradients that grow linearly with the
number of input capsules (every vote interacts with every other vote), so a
layer with 1000 inputs would backpropagate gradients 1000x larger than one
with a single input.  Dividing by n caps the entry magnitude at 1.  The
second half spot-checks the analytic backward pass of the full routing
composite against central differences on the tape.

Run: python3 demos/gradient_scaling.py
"""

import numpy as np

from capsroute.autodiff import Tape, finite_difference_check, fm_agreement_op
from capsroute.routing import fm_activation_jacobian

# -- 1. gradient growth with and without the 1/n scaling ---------------------
print("max |d activation / d vote| for n identical unit votes:")
print(f"{'n':>6} {'scaled (1/n)':>14} {'raw pair sum':>14}")
for n in (2, 8, 64, 512):
    votes = np.zeros((n, 1, 16))
    votes[:, :, 0] = 1.0
    scaled = np.abs(fm_activation_jacobian(votes, scaled=True)).max()
    raw = np.abs(fm_activation_jacobian(votes, scaled=False)).max()
    print(f"{n:>6} {scaled:>14.4f} {raw:>14.1f}")
print("scaled entries approach 1 from below; raw entries are exactly n - 1\n")

# -- 2. the analytic backward pass agrees with finite differences ------------
rng = np.random.default_rng(7)
votes = rng.standard_normal((6, 3, 9))
pose_weights = rng.standard_normal((3, 9))


def scalar_loss(params):
    tape = Tape()
    u = tape.parameter("u", params["u"])
    _, pose, activation = fm_agreement_op(tape, u)
    weighted = tape.mul(pose, tape.constant(pose_weights))
    total = tape.add(tape.sum(tape.sum(weighted, -1), 0), tape.sum(activation, 0))
    return tape, total


tape, loss = scalar_loss({"u": votes})
analytic = tape.backward(loss)
report = finite_difference_check(
    lambda p: float(scalar_loss(p)[1].value),
    {"u": votes},
    analytic,
    h=1e-5,
    op="normalize -> pairwise agreement -> pose + activation",
)
print(f"finite-difference check of '{report.op}':")
print(f"  {votes.size} coordinates probed, max relative error {report.max_rel_error:.3e} "
      f"(step {report.step:g})")
print(f"  verdict: {'PASS' if report.passed else 'FAIL'}")
