"""
The fleet protocol: requests, claims, recordings, events
========================================================

A learner posts recording requests; workers claim them under a lease,
run the episode, and upload the log. Every state change is journaled and
visible through the long-pollable event feed.
"""

import tempfile

from fleetnav.client import FleetClient
from fleetnav.evaluation import unicycle_snapshot
from fleetnav.logs import dump_episode_log
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.protocol import TaskDescriptor
from fleetnav.rollout import run_episode
from fleetnav.server.http import FleetServer
from fleetnav.server.store import FleetStore
from fleetnav.sim import SimConfig

data_dir = tempfile.mkdtemp(prefix="fleet-demo-")
store = FleetStore(data_dir)
store.create_account("learner", "learner-pw")
store.create_account("w0", "w0-pw")

server = FleetServer(store, port=0).start()
print("serving at", server.url)

try:
    # Two clients, two roles. Tokens come from login and ride along as a
    # bearer header on every call.
    learner = FleetClient(server.url)
    learner.login("learner", "learner-pw")
    worker = FleetClient(server.url)
    worker.login("w0", "w0-pw")

    # Requests reference a published policy, so publish one first. The
    # store content-addresses the blob and hands back an id.
    config = SimConfig()
    snap = unicycle_snapshot(config.obs)
    from fleetnav.policy import serialize_snapshot
    pub = learner.publish_policy(serialize_snapshot(snap))
    print("published policy", pub["policy_id"])

    # The learner asks for one episode on a specific layout seed.
    req = learner.create_request(TaskDescriptor(layout_seed=42),
                                 policy_id=pub["policy_id"])
    print("\nopen requests:", [r.request_id for r in worker.list_requests()])

    # The worker claims it. A second claim on the same request would fail
    # with a conflict until the lease expires.
    claim = worker.claim(req.request_id)
    print("claimed:", claim.request_id,
          "lease_ms:", claim.expires_at - claim.issued_at)

    # Run the actual episode and upload the recording under the claim.
    layout = generate_layout(GenConfig(), seed=42)
    log = run_episode(layout, config, snap, seed=1, worker_id="w0")
    rec_id = worker.upload_recording(claim.claim_id,
                                     dump_episode_log(log).encode())
    print("uploaded recording:", rec_id)

    # The learner sees the whole story in the event journal.
    events = learner.poll_events(since=0)
    print("\nevent feed:")
    for ev in events:
        print(f"  cursor={ev.cursor:<3} {ev.kind}")

    # Recordings are immutable blobs, fetchable by id.
    blob = learner.get_recording(rec_id)
    print("\nfetched", len(blob), "bytes back from the store")
finally:
    server.stop()
