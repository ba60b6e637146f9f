"""
Which memory slots does a batch care about?
===========================================

Each finetuning step ranks the slots a batch read and unlocks only the top T
for gradient updates. Two ranking rules are available: TF-IDF against how
many background batches touched a slot, and a KL contribution against the
background read distribution.
"""

import math

import numpy as np

from smf.pkm import AccessCounts
from smf.selection import BackgroundStats, collect_background, score_kl, score_tfidf, select_top_T

# Background: three batches of "ordinary" text read mostly slots 0-3.
background = collect_background([
    AccessCounts([9, 4, 3, 2, 0, 0, 1, 0]),
    AccessCounts([7, 5, 1, 4, 0, 1, 0, 0]),
    AccessCounts([8, 3, 2, 5, 0, 0, 0, 0]),
])
print("background: N =", background.N, " df =", background.df, " b =", background.b)

# A task batch that leans on slots 4 and 6, which the background barely uses.
batch = AccessCounts([6, 1, 0, 2, 5, 0, 4, 0])

tfidf = score_tfidf(batch, background)
kl = score_kl(batch, background, epsilon=1e-10)
np.set_printoptions(precision=3, suppress=True)
print("tf-idf:", tfidf)
print("kl:    ", kl)

# slots the batch never read score -inf and are never selected
for name, s in (("tf-idf", tfidf), ("kl", kl)):
    mask = select_top_T(s, T=2)
    print(f"top-2 by {name}: slots {np.flatnonzero(mask.selected).tolist()}")

# Hand check of the TF-IDF formula on the smallest example:
# two slots read 5 times each, 99 background batches, slot 0 seen in 9 of them.
s = score_tfidf(AccessCounts([5, 5]), BackgroundStats(M=2, N=99, df=np.array([9, 0]), b=np.zeros(2, int)))
print(f"tf-idf of slot 0 = {s[0]:.6f}  (0.5 * ln 10 = {0.5 * math.log(10):.6f})")

# And of the KL rule: all reads on one of four slots, empty background.
s = score_kl(AccessCounts([10, 0, 0, 0]), BackgroundStats(M=4, N=1, df=np.zeros(4, int), b=np.zeros(4, int)),
             epsilon=1e-300)
print(f"kl of slot 0 = {s[0]:.6f}  (ln 4 = {math.log(4):.6f})")
