"""flowc: compile agent workflow plans against a task batch.

A plan is a DAG whose nodes either call a model or run a closed, total
expression program. The toolkit executes plans with full tracing, scores
traces against gold answers, and hill-climbs over discrete plan rewrites
(prompt refinement, code offloading, consensus wrapping, decompose/fuse)
proposed by a teacher until the batch passes or the epoch budget runs out.
"""

__version__ = "0.1.0"
