from .__version__ import __version__
from .engine import AttackConfig, AttackResult, QueryOracle, gfcs_attack, simba_attack
from .harness import CampaignSpec, load_campaign_spec, run_campaign
from .models import ScoreModel, load_model, save_model, train_classifier

__all__ = [
    "AttackConfig",
    "AttackResult",
    "CampaignSpec",
    "QueryOracle",
    "ScoreModel",
    "gfcs_attack",
    "load_campaign_spec",
    "load_model",
    "run_campaign",
    "save_model",
    "simba_attack",
    "train_classifier",
]
