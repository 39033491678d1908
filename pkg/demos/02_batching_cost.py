# coding: utf-8

# # What padding costs
#
# Three crop sizes in equal numbers, 16^3 patches. Padding everything to the
# largest crop means every sample carries 216 tokens. Batching samples of one
# size together lets each sample keep its own length.

from fractions import Fraction

from varivit import batching
from varivit.numerics import Rng

edges = [64, 80, 96] * 10
cbs = batching.plan_cbs(edges, 4, Rng(0))
pad = batching.plan_pad_to_max(edges, 4, Rng(0))
print("CBS batches:", len(cbs.batches), "sizes", sorted(len(b) for b in cbs.batches))
print("first batches:", [[edges[i] for i in b] for b in cbs.batches[:3]])


# Tokens scale with N and attention pairs with N^2, so the quadratic term
# saves more.

(t1, p1), (t0, p0) = batching.token_cost(cbs, edges, 16), batching.token_cost(pad, edges, 16)
print("token saving", 1 - Fraction(t1, t0), "=", f"{100 * (1 - t1 / t0):.3f}%")
print("pair saving ", 1 - Fraction(p1, p0), "=", f"{100 * (1 - p1 / p0):.3f}%")


# Gradient accumulation gets the same token cost with singleton batches and
# one optimizer step per 8 samples.

ga = batching.plan_ga(edges, 8, Rng(0))
print("GA update groups:", [sum(len(b) for b in g) for g in ga.update_groups()])
print("GA cost equals CBS:", batching.token_cost(ga, edges, 16) == (t1, p1))
