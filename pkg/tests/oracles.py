"""Scalar loop implementations of the three objectives, written without vectorization
so they stay independent of the library code they check."""
import math


def extrap_oracle(e_s, e_t, mask):
    total, count = 0.0, 0
    for i in range(len(e_s)):
        if mask[i]:
            for d in range(len(e_s[i])):
                total += abs(e_s[i][d] - e_t[i][d])
                count += 1
    return total / count


def shuffle_oracle(logits, order, e_s, e_t, lam):
    n = len(order)
    ce = 0.0
    for i in range(n):
        row = logits[i]
        peak = max(row)
        log_z = peak + math.log(sum(math.exp(v - peak) for v in row))
        ce += -(row[order[i]] - log_z)
    ce /= n
    sq, count = 0.0, 0
    for i in range(n):
        for d in range(len(e_s[i])):
            sq += (e_s[i][d] - e_t[order[i]][d]) ** 2
            count += 1
    return lam * ce + sq / count, ce, sq / count


def comp_decomp_oracle(e_comp, e_t_global, e_decomp, e_t_subs):
    dim = len(e_comp)
    comp = sum(abs(e_comp[d] - e_t_global[d]) for d in range(dim)) / dim
    decomp = 0.0
    for i in range(4):
        decomp += sum(abs(e_decomp[i][d] - e_t_subs[i][d]) for d in range(dim)) / dim
    decomp /= 4
    return comp + decomp, comp, decomp
