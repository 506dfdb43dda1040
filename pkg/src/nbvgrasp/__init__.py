"""Next-best-view grasp planning sandbox.

Subpackages:
    geom         camera model, oriented boxes, rays, sphere frames
    nbv          velocity fields on a view sphere and trajectory integration
    scene        object records and detection-to-record association
    relations    pairwise spatial relations and strategy selection
    fusion       multi-view grasp fusion with directional posteriors
    simenv       deterministic synthetic environment
    orchestrator closed-loop planner tying everything together
    cli          command line entry points
"""

__version__ = "0.1.0"
