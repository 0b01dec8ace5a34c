"""Backdoor vulnerability scanning and hardening toolkit.

The pieces compose like a small pipeline: the zoo trains desk-scale models
and datasets, attacks inject known backdoors (and calibrate budgets),
scanners invert triggers under regulation-space bounds, defenses evaluate
and remove what the scanners find, and the harness orchestrates it all
behind a CLI.
"""

from .core import (ACCURACY_FLOOR, ASR_FLOOR, BackdoorVerdict, ClassifierHandle,
                   ImageSample, ImageSet, ModelBundle, RegulationSpec,
                   attack_success_rate, evaluate_accuracy, metric_distance,
                   validate_verdict)
from .losses import (LambdaController, ObjectiveConfig, bound_loss,
                     exploitation_loss, regulation_distance, total_objective)
from .scanner import (SCANNER_CLASSES, DatasetProfile, ScanConfig, ScanReport,
                      TriggerInverter, desk_profile, invert_trigger, preset,
                      run_campaign)
from .triggers import (FrequencyTrigger, LocalizedTrigger, PervasiveTrigger, dft,
                       load_trigger, save_trigger)

__version__ = "0.1.0"

__all__ = [
    "ACCURACY_FLOOR", "ASR_FLOOR", "BackdoorVerdict", "ClassifierHandle",
    "ImageSample", "ImageSet", "ModelBundle", "RegulationSpec",
    "attack_success_rate", "evaluate_accuracy", "metric_distance",
    "validate_verdict", "LambdaController", "ObjectiveConfig", "bound_loss",
    "exploitation_loss", "regulation_distance", "total_objective",
    "SCANNER_CLASSES", "DatasetProfile", "ScanConfig", "ScanReport",
    "TriggerInverter", "desk_profile", "invert_trigger", "preset",
    "run_campaign", "FrequencyTrigger", "LocalizedTrigger", "PervasiveTrigger",
    "dft", "load_trigger", "save_trigger", "__version__",
]
