import math

import ordergate_py as og


def close(a, b, tol):
    assert abs(a - b) <= tol, (a, b)


close(og.kl_bernoulli(0.95, 0.10), 1.994, 1e-3)
close(og.p_max(1.0, 0.10), 0.689, 1e-3)

p = og.plan(0.10, 2.0)
assert p["decision"] == "answer", p
close(p["isr"], 1.003, 1e-3)
assert og.plan(0.02, 2.0)["decision"] == "refuse"

close(og.qmv_bound(1.0, 60, 1.0), (math.log(60) - 1.5) / 4, 1e-12)
exact, approx, gap = og.expected_harmonic_distance(2)
close(exact, 0.5, 1e-15)

perms, short = og.banded_permutations(64, 12, 7)
assert len(perms) == 64 and not short
assert all(sorted(q) == list(range(1, 13)) for q in perms)
perms, short = og.banded_permutations(5, 3, 7)
assert perms == [[1, 2, 3]] and short
assert og.uniform_permutation(4, 3) == og.uniform_permutation(4, 3)

disp, tv, bound = og.jsd_certificate([{"1": 0.2, "0": 0.8}, {"1": 0.8, "0": 0.2}], ["1"])
close(disp, 0.3, 1e-12)
assert disp <= tv + 1e-12 <= bound + 2e-12

assert og.jensen_gap([0.2, 0.4, 0.9], 3) >= 0.0
q_bar, resid, pair = og.dispersion([0.1, 0.5, 0.9])
assert resid <= pair <= 2 * resid

weights, uniform_ce, optimized_ce = og.mixture_weights([[0.9, 0.1, 0.1]] * 5, [12] * 5)
assert optimized_ce <= uniform_ce and weights[12][0] > 0.9

ols, iv = og.dose_estimates(count=4000, seed=1)
close(ols["slope"], -0.13, 0.05)
close(iv["first_stage_slope"], 0.375, 0.05)

try:
    og.kl_bernoulli(0.5, 1.0)
except ValueError:
    pass
else:
    raise AssertionError("boundary prior must raise")

print("smoke test ok")
