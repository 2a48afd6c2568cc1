"""
From click logs to training pairs
=================================

User behavior arrives as (user, viewed note, clicked note) events. Two
notes are related when many users who saw one clicked through to the
other, with each user's vote shrunk by how many distinct notes they
clicked overall -- a compulsive clicker says less about any single link.
"""

from mlrm.data import BehaviorEvent, PairConfig, build_pairs, cooccurrence

events = [
    # three focused readers all go from note 1 to note 2
    BehaviorEvent(user=1, viewed=1, clicked=2),
    BehaviorEvent(user=2, viewed=1, clicked=2),
    BehaviorEvent(user=3, viewed=1, clicked=2),
    # a scattershot user: three distinct clicks, so each vote is worth 1/3
    BehaviorEvent(user=4, viewed=1, clicked=2),
    BehaviorEvent(user=4, viewed=1, clicked=3),
    BehaviorEvent(user=4, viewed=2, clicked=5),
    BehaviorEvent(user=4, viewed=3, clicked=5),
    # repeat events from one user count once per (viewed, clicked) pair
    BehaviorEvent(user=5, viewed=2, clicked=3),
    BehaviorEvent(user=5, viewed=2, clicked=3),
]

scores = cooccurrence(events)
print("co-occurrence scores:")
for (viewed, clicked), score in sorted(scores.items()):
    print(f"  {viewed} -> {clicked}: {score:.4f}")

# Mining keeps, per query note, the top few partners whose score lies
# strictly inside (lower, upper); the bounds kill one-off flukes and
# runaway hubs.
pairs = build_pairs(events, PairConfig(per_query=2))
print("\nmined pairs:")
for p in pairs:
    print(f"  query {p.query} related {p.related} score {p.score:.4f}")

# The upper bound is strict: a pair pushed to exactly the cap vanishes.
flood = [BehaviorEvent(user=100 + u, viewed=8, clicked=9) for u in range(30)]
print("\npairs from 30 independent one-click users (score == cap):",
      build_pairs(flood, PairConfig()))
