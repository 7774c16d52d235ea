from spamlens.checkpoint import load_checkpoint, save_checkpoint
from spamlens.cnn_model import CnnModel, TrainConfig, build_model, evaluate, forward, predict, train
from spamlens.dataset_pipeline import gen_synthetic, ingest, normalize, split
from spamlens.lime_explainer import LimeConfig, explain, segment
from spamlens.metrics import ConfusionMatrix, accuracy, confusion, f1, precision, recall
from spamlens.saliency_heatmap import occlusion_map
from spamlens.shap_explainer import ShapConfig, exact_shapley, kernel_shap
