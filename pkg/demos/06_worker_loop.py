"""
A worker serving requests end to end
====================================

The Worker class wraps the claim/run/upload cycle: it polls for requests,
regenerates the layout from its seed, fetches the requested policy, runs
the episode locally, and uploads the recording with retries.
"""

import tempfile

from fleetnav.client import FleetClient
from fleetnav.evaluation import unicycle_snapshot
from fleetnav.policy import serialize_snapshot
from fleetnav.protocol import TaskDescriptor
from fleetnav.server.http import FleetServer
from fleetnav.server.store import FleetStore
from fleetnav.sim import SimConfig
from fleetnav.worker import Worker, WorkerConfig

store = FleetStore(tempfile.mkdtemp(prefix="fleet-demo-"))
store.create_account("learner", "learner-pw")
store.create_account("w0", "w0-pw")
server = FleetServer(store, port=0).start()

try:
    learner = FleetClient(server.url)
    learner.login("learner", "learner-pw")

    # Publish the policy the requests will point at. Workers verify the
    # blob against its content hash before running anything.
    config = SimConfig()
    blob = serialize_snapshot(unicycle_snapshot(config.obs))
    pub = learner.publish_policy(blob)
    print("published policy", pub["policy_id"])

    for seed in (3, 4, 5):
        learner.create_request(TaskDescriptor(layout_seed=seed),
                               policy_id=pub["policy_id"])

    # Drive the claim/run/upload cycle by hand until the queue is empty.
    # The production entry point is run(), which loops and long-polls;
    # run_cycle() is one beat of that loop and reports what it did.
    worker = Worker(WorkerConfig(
        server=server.url, username="w0", password="w0-pw",
        seed=9, poll_interval_s=0.1))
    worker.client.login("w0", "w0-pw")
    while True:
        report = worker.run_cycle()
        print("cycle:", report)
        if report["status"] == "idle":
            break

    # Each upload produced a recording and a journal entry.
    recs = store.list_recordings()
    print("\nrecordings in store:", len(recs))
    kinds = [ev.kind for ev in store.poll_events(since=0)]
    print("journal kinds:", sorted(set(kinds)))

    # The server tracks per-worker statistics for the fleet dashboard.
    for row in learner.worker_stats():
        print("stats:", row)
finally:
    server.stop()
