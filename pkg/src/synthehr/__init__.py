"""Generate synthetic EHR tables and score their fidelity, downstream utility and privacy."""

from .fidelity import KlReport, kl_by_group, kl_continuous, kl_table
from .gbm import predict_proba, top_k_features
from .generators import CopyBackend, GenerationRequest, GenerationStrategy, ReferenceBackend, degrade, generate
from .harness import ExperimentConfig, config_from_dict, emit_report, load_config, run
from .llm import LLMClient, RemoteBackend, extract_rows, render_prompt
from .privacy import MiaReport, MiaSetup, mia_experiment, run_attack
from .schema import DataTable, FeatureSpec, TableSchema, load_schema, load_table, select_features, split, summarize
from .simulate import simulate_cohort
from .utility import EvalReport, GbmConfig, auprc, auroc, eval_across, eval_within, train

__version__ = "0.1.0"
