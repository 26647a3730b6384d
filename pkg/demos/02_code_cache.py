"""
Code cache and block linking
============================

Run the 1000-iteration ``hot_loop`` fixture with and without direct-branch
linking and watch the cache counters.
"""
from rvleak.engine import Engine
from rvleak.guestkit.fixtures import build_fixture
from rvleak.loader import build_process


def run(linking):
    fx = build_fixture("hot_loop")
    proc = build_process(fx.elf, "hot_loop", ["hot_loop", "tc/0000"])
    eng = Engine(proc, files={"tc/0000": b"x"}, linking=linking)
    eng.run()
    hot_b = eng.cache.blocks[fx.program.labels["hot_b"]]
    return eng.stats, hot_b


# %%
# With linking, a block jumps straight into its cached successor, so the
# dispatcher is entered only a few times however long the loop runs.
for linking in (True, False):
    stats, hot_b = run(linking)
    print(f"linking={linking!s:5}  blocks decoded={stats.blocks_decoded:3}  "
          f"dispatcher entries={stats.dispatcher_entries:5}  "
          f"links={stats.branches_linked:2}  hot_b executed={hot_b.exec_count}")

# %%
# Either way each block is decoded once: misses equal decoded blocks.
stats, _ = run(True)
assert stats.lookup_misses == stats.blocks_decoded
assert stats.lookup_hits + stats.lookup_misses == stats.dispatcher_entries
