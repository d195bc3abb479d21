"""Batch-clearing exchange engine: order books, price solving, block pipeline."""

from __future__ import annotations

from .clearing import ClearingPlan, PairBounds, feasibility_probe, solve_clearing, solve_general, solve_max_circulation
from .decomposition import MarketPartition, solve_decomposed
from .demand import DemandVector, SupplyCurve, SupplyCurves, demand_query
from .errors import BatchDexError, ValidationError
from .fixedpoint import ONE, Price
from .model import ApproxParams, AssetRegistry, Offer, OfferId
from .orderbook import OrderbookSet
from .pipeline import Block, BlockHeader, Chain, Node, NodeConfig, recover, replay, validate
from .tatonnement import SolverConfig, SolverResult, run, run_multi, unrealized_utility_ratio
from .transactions import CancelOffer, CreateAccount, CreateOffer, Payment, Transaction
from .trie import Trie
from .txengine import BlockState, filter_block
from .workload import MarketModel, Workload, WorkloadFile

__all__ = [
    "ApproxParams", "AssetRegistry", "BatchDexError", "Block", "BlockHeader", "BlockState", "CancelOffer", "Chain",
    "ClearingPlan", "CreateAccount", "CreateOffer", "DemandVector", "MarketModel", "MarketPartition", "Node",
    "NodeConfig", "ONE", "Offer", "OfferId", "OrderbookSet", "PairBounds", "Payment", "Price", "SolverConfig",
    "SolverResult", "SupplyCurve", "SupplyCurves", "Transaction", "Trie", "ValidationError", "Workload", "WorkloadFile",
    "demand_query", "feasibility_probe", "filter_block", "recover", "replay", "run", "run_multi", "solve_clearing",
    "solve_decomposed", "solve_general", "solve_max_circulation", "unrealized_utility_ratio", "validate",
]
