"""
Reverse posteriors, hard commits and soft embeddings
====================================================

Walks through the absorbing-state reverse step on a single position, shows
why a hard argmax commit has infinite KL to the true reverse distribution,
and builds the soft embedding that replaces it.
"""

import numpy as np

from lrd.oracle import ApproxPosterior, EnumerableDistribution, exact_x0_posterior, kl_hard_vs_soft
from lrd.probcore import linear_schedule, top_p_nucleus, true_posterior
from lrd.sampler import soft_embedding

# a 4-step linear schedule: survival probabilities alpha_t
sched = linear_schedule(4)
print("alpha_t:", sched.alphas)

# a masked position at t = 3 either was already masked at t = 2 or was still x0
post = true_posterior(sched[2], sched[3], x0_token=1)
print(f"q(x_2 = x0 | x_3 = MASK) = {post.p_x0:.4f}, q(MASK) = {post.p_mask:.4f}")

# a hard commit to the wrong token puts zero mass where the true posterior has mass
V = 4
hard = ApproxPosterior.hard(2)
soft = ApproxPosterior.soft([0.1, 0.4, 0.1, 0.1, 0.3])  # four tokens, then MASK
kh, ks = kl_hard_vs_soft(post, hard, soft, V)
print(f"KL to hard guess: {kh}, KL to soft guess: {ks:.4f}")

# the clean-data posterior of a tiny distribution over 2-token strings
dist = EnumerableDistribution.from_pairs([((0, 1), 0.5), ((0, 2), 0.3), ((3, 1), 0.2)])
print("x0 posterior given (MASK, 1):\n", exact_x0_posterior([V, 1], dist, V))

# soft embedding: MASK row mixed with the nucleus-expected token row
rng = np.random.default_rng(0)
table = rng.standard_normal((V + 1, 3))
p = np.array([0.7, 0.2, 0.06, 0.04])
nuc = top_p_nucleus(p, 0.9)
print("nucleus:", nuc.support, nuc.renorm_probs)
for r_f in (0.0, 0.15, 0.5, 1.0):
    mix = soft_embedding(p, table, r_f, 0.9)
    print(f"r_f={r_f:<5} alpha={mix.alpha:.4f} embedding={np.round(mix.embedding, 4)}")

# confident predictions move the embedding further from MASK
for p in ([1.0, 0, 0, 0], [0.5, 0.5, 0, 0], [0.25] * 4):
    mix = soft_embedding(np.array(p), table, 1.0, 1.0)
    print(f"p={p} alpha={mix.alpha:.3f}")
