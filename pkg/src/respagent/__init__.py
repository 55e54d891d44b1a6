"""Desk-scale multimodal respiratory diagnosis and synthesis stack.

Subpackages and modules:

* :mod:`respagent.attention` - sliding-window + global-token sparse attention
* :mod:`respagent.weaving` - splicing projected audio frames into a text stream
* :mod:`respagent.diagnoser` - toy long-context classifier, losses and metrics
* :mod:`respagent.unit_generator` - style-conditioned discrete-unit language model
* :mod:`respagent.cfm` - conditional flow matching decoder and Euler sampler
* :mod:`respagent.planner` - synthesis budget allocation and the closed loop
* :mod:`respagent.benchkit` - synthetic corpus, QA screening, metrics, CLI
"""

__version__ = "0.1.0"
