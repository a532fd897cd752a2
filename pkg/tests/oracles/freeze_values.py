"""Recompute the literal expected values frozen into the unit tests.

Pure Python and mpmath only, no package code and no numpy, so these
numbers are independent of the implementation under test.  Run with
``python3 tests/oracles/freeze_values.py``.
"""
import mpmath as mp

mp.mp.dps = 40


def matvec(M, v):
    return [mp.fsum(M[i][j] * v[j] for j in range(len(v))) for i in range(len(M))]


def relu(v):
    return [x if x > 0 else mp.mpf(0) for x in v]


def nll_mean(logits, labels):
    tot = 0
    for row, y in zip(logits, labels):
        lse = mp.log(mp.fsum(mp.e ** x for x in row))
        tot += lse - row[y]
    return tot / len(labels)


# fixed 2-layer net: 3 -> 2 (relu) -> 3, bias as last column
W1 = [[0.5, -1.0, 0.25, 0.1], [-0.75, 0.5, 1.0, -0.2]]
W2 = [[1.0, -0.5, 0.3], [0.2, 0.8, -0.1], [-1.2, 0.4, 0.05]]
X = [[1.0, 2.0, -1.0], [0.5, -0.5, 2.0]]
Y = [2, 0]


def net_logits(W1, W2, X):
    out = []
    for x in X:
        h = relu(matvec([[mp.mpf(w) for w in r] for r in W1], [mp.mpf(v) for v in x] + [1]))
        out.append(matvec([[mp.mpf(w) for w in r] for r in W2], h + [1]))
    return out


logits = net_logits(W1, W2, X)
print("FORWARD_LOGITS =", [[float(v) for v in row] for row in logits])
print("FORWARD_NLL =", float(nll_mean(logits, Y)))

L = [[1.0, 2.0, 3.0], [0.0, -1.0, 2.0], [0.3, 0.3, -4.0]]
print("NLL_FIXED =", float(nll_mean([[mp.mpf(v) for v in r] for r in L], [2, 0, 1])))

# capture-factor A of the first layer: mean of augmented-input outer products
A0 = [[mp.fsum((X[n] + [1.0])[i] * (X[n] + [1.0])[j] for n in range(2)) / 2 for j in range(4)] for i in range(4)]
print("A0 =", [[float(v) for v in r] for r in A0])

# quadratic penalty, one layer 2x3, diag prior + two Kronecker pairs, vec column-major
D = [[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]
diag = [[0.01, 0.02, 0.03], [0.04, 0.05, 0.06]]
pairs = [
    (2.0, [[1.0, 0.2, 0.0], [0.2, 2.0, 0.1], [0.0, 0.1, 0.5]], [[1.5, -0.3], [-0.3, 0.7]]),
    (-0.5, [[0.4, 0.0, 0.1], [0.0, 0.3, 0.0], [0.1, 0.0, 0.2]], [[0.6, 0.1], [0.1, 0.2]]),
]
vecD = [D[r][c] for c in range(3) for r in range(2)]
vecdiag = [diag[r][c] for c in range(3) for r in range(2)]
n = 6
Lam = [[mp.mpf(vecdiag[i]) if i == j else mp.mpf(0) for j in range(n)] for i in range(n)]
for w, Lf, Rf in pairs:
    for i in range(n):
        for j in range(n):
            # kron(L, R)[i, j] with i = a*2 + b, j = c*2 + d
            a, b = divmod(i, 2)
            c, d = divmod(j, 2)
            Lam[i][j] += w * Lf[a][c] * Rf[b][d]
pen = mp.fsum(vecD[i] * Lam[i][j] * vecD[j] for i in range(n) for j in range(n)) / 2
print("PENALTY_FIXED =", float(pen))

# closed-form KL between two 3-d diagonal Gaussians
mq, sq = [0.3, -1.0, 2.0], [0.5, 1.5, 0.2]
mpp, sp = [0.0, -0.5, 1.0], [1.0, 0.8, 0.4]
kl = mp.fsum(mp.log(b / a) + (a * a + (m1 - m2) ** 2) / (2 * b * b) - mp.mpf(1) / 2 for m1, a, m2, b in zip(mq, sq, mpp, sp))
print("KL_FIXED =", float(kl))

# scalar adjusted Fisher (1 - alpha a g)^2 at g~ : a=2, g=0.5, at=3, gt=0.25, alpha=0.4
print("SCALAR_FISHER =", float((1 - mp.mpf("0.4") * 2 * mp.mpf("0.5")) ** 2 * 3 * mp.mpf("0.25")))
