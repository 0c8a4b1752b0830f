"""Grid event processing service.

Event datasets are pre-split into fragment files ("bricks") that live on
worker nodes. Filter jobs are submitted through an HTTP gateway, planned
for data locality by a polling broker, executed on the nodes over their
local fragments, and merged deterministically on the job-submit side.
"""

__version__ = "0.1.0"
