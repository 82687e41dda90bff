"""Deterministic simulator for elastic mixture-of-experts serving.

Subpackages cover group-wise bit-nested quantization (``bitnest``), sliced
integer MACs (``slicemac``), a small deterministic MoE model (``toymoe``),
elastic self-speculative decoding (``elastic_sd``), expert cache analysis
(``expert_cache``), a memory-tier hardware cost model (``hwmodel``), and the
scenario runner (``runner``).
"""

from __future__ import annotations

__version__ = "0.1.0"
