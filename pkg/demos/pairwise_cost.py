"""Where the pairwise aggregator spends its time as k shrinks.

Splits one forward+backward of the non-local operator into the linear
part (query/key/value/output projections, linear in k) and the pairwise
part (scores, softmax, mixing; quadratic in k), single-threaded at
d = 512 with 2 heads.

    python3 demos/pairwise_cost.py
"""

import time

import numpy as np
from threadpoolctl import threadpool_limits

from hvqa import tensor as T
from hvqa.aggregation import NonLocalPairwise
from hvqa.tensor import Tensor


def median_ms(fn, reps=15):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000)
    return float(np.median(times))


def main():
    rng = np.random.default_rng(0)
    d, heads = 512, 2
    op = NonLocalPairwise(d, heads, d // heads, rng)
    print(f"{'k':>4} {'total ms':>9} {'linear ms':>10} {'pairwise ms':>12}")
    with threadpool_limits(1):
        for k in (8, 16, 32, 64):
            x = Tensor(rng.standard_normal((1, k, d)).astype(np.float32), requires_grad=True)

            def total():
                T.backward(op(x).sum())

            def linear():
                # same four projections, no k x k interaction
                v = T.matmul(x, op.w_v) + T.matmul(x, op.w_q) + T.matmul(x, op.w_k)
                T.backward(op.out(v).sum())

            t_all, t_lin = median_ms(total), median_ms(linear)
            print(f"{k:>4} {t_all:>9.3f} {t_lin:>10.3f} {t_all - t_lin:>12.3f}")


if __name__ == "__main__":
    main()
