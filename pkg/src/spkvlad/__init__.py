"""Speaker verification embeddings: STFT front-end, thin-ResNet trunk,
NetVLAD/GhostVLAD temporal aggregation, AM-Softmax training, EER evaluation."""

from .audio import (AudioBuffer, Spectrogram, load_wav, save_wav,
                    stft_spectrogram, normalize_spectrogram, random_crop)
from .model import (ModelConfig, TrunkConfig, VladParams, build_model,
                    build_thin_resnet, netvlad_aggregate, ghostvlad_aggregate,
                    tap_aggregate, save_checkpoint, load_checkpoint)
from .losses import AmSoftmaxConfig, softmax_ce, am_softmax
from .train import TrainConfig, AdamState, adam_step, SpectrogramDataset, train
from .evaluate import (VerificationPair, ScoreSet, EerResult, cosine_score,
                       compute_eer, sample_pairs, score_pairs, length_probe)
from .synth import SynthSpeakerSpec, synth_utterance, make_synth_dataset

__version__ = "0.1.0"
