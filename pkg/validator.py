#!/usr/bin/env -S venv/bin/python3
"""
Oblique Vector Validator - CLI Tool

Prüft Straßenvektoren gegen Schrägluftbilder, trainiert den Klassifikator und
korrigiert inkonsistente Straßen.
"""

import argparse
import json
import os
import sys
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

# Add project root to path (for src.* imports when run directly via shebang)
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np

from src.conflation import (
    HALF_LENGTH_PX,
    STEP_PX,
    ConflationError,
    ConflationParams,
    apply_corrections,
    conflate_segments,
    validate_segments,
)
from src.descriptors import (
    COLOR_CENTERS,
    PATCH_SIZE,
    SIGMA_S,
    DescriptorError,
    DescriptorParams,
    extract_raw_descriptors,
)
from src.dumps import (
    DumpFormatError,
    descriptor_table,
    merge_tables,
    read_descriptors,
    read_samples,
    read_scores,
    write_descriptors,
    write_roc,
    write_samples,
    write_scores,
    write_verdicts,
)
from src.evaluation import (
    N_SPLITS,
    N_TEST,
    ConfusionCounts,
    EvaluationError,
    compare_kernels,
    metrics,
    plot_roc_curves,
    roc,
    summary_lines,
    train_on_raw,
)
from src.imaging import (
    draw_conflation_overlay,
    draw_label_overlay,
    draw_sample_overlay,
    draw_verdict_overlay,
    load_image,
    save_image,
)
from src.projection import SPACING_PX, sample_segments
from src.scene_model import DemBoundsError, SceneParseError, SceneValidationError, load_scene, save_scene
from src.svm import (
    BOX_C,
    KERNEL_KINDS,
    RBF_SIGMA,
    KernelError,
    KernelSpec,
    SvmConvergenceError,
    TrainingError,
    load_model,
    save_model,
)
from src.synthgen import (
    ErrorInjection,
    InjectionError,
    RecipeError,
    RenderError,
    SceneRecipe,
    load_recipe,
    save_recipe,
    synthesize,
)

COMMANDS = ('synth', 'extract', 'train', 'validate', 'conflate', 'roc', 'evaluate')

OUTPUT_ENV = 'VALIDATOR_OUTPUT_DIR'

# Fehler der Module, die als Diagnose mit Exit-Code 1 enden
MODULE_ERRORS = (
    SceneParseError, SceneValidationError, DemBoundsError, DescriptorError, KernelError,
    TrainingError, SvmConvergenceError, EvaluationError, RecipeError, RenderError,
    InjectionError, DumpFormatError, ConflationError,
)


@dataclass(frozen=True)
class RunConfig:
    command: str
    output_dir: Path
    inputs: Dict[str, object] = field(default_factory=dict)
    descriptor: DescriptorParams = DescriptorParams()
    spacing_px: float = SPACING_PX
    kernel: KernelSpec = KernelSpec()
    box_c: float = BOX_C
    conflation: ConflationParams = ConflationParams()
    # None: Seed des Rezepts bzw. 0
    rng_seed: Optional[int] = None
    workers: int = 1

    @property
    def seed(self) -> int:
        return 0 if self.rng_seed is None else self.rng_seed


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or 'output')


def save_json(data: Dict, filepath: Path) -> None:
    """Speichert Daten als JSON."""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


def print_header(text: str) -> None:
    """Druckt formatierten Header."""
    print("\n" + "=" * 80)
    print(f"  {text}")
    print("=" * 80 + "\n")


def print_counts(title: str, counts: Dict[str, int]) -> None:
    print(f"{title}:")
    for name, count in counts.items():
        print(f"  {name:12s}: {count:6d}")


def _fmt_metric(value: Optional[float]) -> str:
    return 'n/a' if value is None else f"{value:.4f}"


# --- Subkommandos ---

def cmd_synth(config: RunConfig) -> None:
    """Rezept -> Bild, Szene (verfälscht), Wahrheit, gelabelte Abtastpunkte."""
    inputs = config.inputs
    recipe = load_recipe(inputs['recipe']) if inputs.get('recipe') else SceneRecipe()
    if config.rng_seed is not None:
        recipe = replace(recipe, rng_seed=config.rng_seed)

    injections = []
    if inputs.get('offset_px'):
        injections.append(ErrorInjection('vector_offset_px', inputs['offset_px'], tuple(inputs.get('roads') or ())))
    for building_id in inputs.get('delete_building') or ():
        injections.append(ErrorInjection('delete_building', 0.0, (building_id,)))
    if inputs.get('dem_bias'):
        injections.append(ErrorInjection('dem_bias_m', inputs['dem_bias']))
    if inputs.get('yaw'):
        injections.append(ErrorInjection('camera_yaw_deg', inputs['yaw']))

    print_header(f"SYNTHESIZING SCENE (seed {recipe.rng_seed})")
    result = synthesize(recipe, injections, inputs.get('n_pos'), inputs.get('n_neg'),
                        config.spacing_px, config.descriptor,
                        progress=lambda message: print(f"⏳ {message}..."))

    out = config.output_dir
    save_recipe(recipe, out / 'recipe.json')
    save_image(result.image, out / 'image.png', kind='render')
    save_scene(result.true_scene, out / 'truth_scene.json')
    save_scene(result.corrupted_scene, out / 'scene.json')
    write_samples(result.samples, out / 'samples.csv')
    save_image(draw_label_overlay(result.true_scene, result.image), out / 'labels.png', kind='labels')

    print(f"\nRoads:        {len(result.true_scene.roads.segments)}")
    print(f"Buildings:    {len(result.true_scene.buildings)}")
    print(f"Injections:   {', '.join(e.kind for e in injections) or 'keine'}")
    print_counts("\nSamples by source", dict(Counter(s.source for s in result.samples)))
    print(f"\n💾 Artifacts saved to: {out}")


def cmd_extract(config: RunConfig) -> None:
    """Szene + Bild (+ gelabelte Abtastpunkte) -> Deskriptor-Dump."""
    inputs = config.inputs
    image = load_image(inputs['image'])
    if inputs.get('samples'):
        samples = read_samples(inputs['samples'])
        print(f"⏳ Using {len(samples)} samples from {inputs['samples']}")
    else:
        scene = load_scene(inputs['scene'])
        samples = sample_segments(scene, config.spacing_px)
        print(f"⏳ Sampled {len(samples)} points along {len(scene.roads.segments)} roads")

    print_header(f"EXTRACTING DESCRIPTORS: {len(samples)} samples")
    raw, kept = extract_raw_descriptors(image, samples, config.descriptor, config.workers, verbose=True)
    kept_samples = [samples[i] for i in kept]
    out = config.output_dir
    write_descriptors(descriptor_table(kept_samples, raw), out / 'descriptors.csv')
    save_image(draw_sample_overlay(image, kept_samples), out / 'samples.png', kind='samples')
    print(f"\n💾 Descriptors saved to: {out / 'descriptors.csv'}")


def cmd_train(config: RunConfig) -> None:
    """Deskriptor-Dumps -> Modelldatei."""
    table = merge_tables([read_descriptors(path) for path in config.inputs['descriptors']])
    truths = table.truths()
    print_header(f"TRAINING SVM ({config.kernel.kind}, C={config.box_c})")
    print(f"Positive:     {int(np.sum(truths == 1))}")
    print(f"Negative:     {int(np.sum(truths == -1))}\n")
    model = train_on_raw(table.values, truths, config.kernel, config.box_c, verbose=True)
    save_model(model, config.output_dir / 'model.json')
    print(f"\n✅ {len(model.multipliers)} support vectors, {model.iterations} iterations")
    print(f"💾 Model saved to: {config.output_dir / 'model.json'}")


def _judge(config: RunConfig):
    inputs = config.inputs
    scene = load_scene(inputs['scene'])
    image = load_image(inputs['image'])
    model = load_model(inputs['model'])
    samples = sample_segments(scene, config.spacing_px)
    verdicts = validate_segments(image, model, samples, config.descriptor,
                                 workers=config.workers, verbose=True)
    return scene, image, model, samples, verdicts


def cmd_validate(config: RunConfig) -> None:
    """Szene + Bild + Modell -> Urteile pro Straße und eingefärbtes Bild."""
    print_header("VALIDATING ROAD SEGMENTS")
    _, image, _, samples, verdicts = _judge(config)

    out = config.output_dir
    write_verdicts(verdicts, out / 'verdicts.csv')
    by_segment: Dict[str, List] = {}
    for s in samples:
        by_segment.setdefault(s.segment_id, []).append(s)
    save_image(draw_verdict_overlay(image, by_segment, {v.segment_id: v.consistent for v in verdicts}),
               out / 'verdicts.png', kind='verdicts')

    print()
    for v in verdicts:
        status = '✅' if v.consistent else '❌'
        print(f"  {status} {v.segment_id:16s} {v.positive:4d}/{v.total:<4d} mean score {v.mean_score:+.3f}")
    consistent = sum(1 for v in verdicts if v.consistent)
    print(f"\n📊 Consistent: {consistent} of {len(verdicts)} segments")
    print(f"💾 Verdicts saved to: {out / 'verdicts.csv'}")


def cmd_conflate(config: RunConfig) -> None:
    """Inkonsistente Straßen korrigieren, korrigierte Vektoren anhängen."""
    print_header("CONFLATING INCONSISTENT SEGMENTS")
    scene, image, model, _, verdicts = _judge(config)
    negative = {v.segment_id: v.samples for v in verdicts if not v.consistent}
    if not negative:
        print("✅ No inconsistent segments, nothing to correct")

    results = conflate_segments(scene, image, model, negative, config.conflation,
                                workers=config.workers, verbose=True)
    out = config.output_dir
    save_scene(apply_corrections(scene, results), out / 'corrected_scene.json')
    save_image(draw_conflation_overlay(image, results), out / 'conflation.png', kind='conflation')

    corrected = sum(len(r.corrected_polylines) for r in results)
    print(f"\n📊 {corrected} corrected polylines for {len(results)} segments")
    if corrected:
        print("⚠️  Heights of corrected roads come from the DEM (no bridge models)")
    print(f"💾 Corrected scene saved to: {out / 'corrected_scene.json'}")


def cmd_roc(config: RunConfig) -> None:
    """Score-Datei -> ROC-Kurve, Kennzahlen bei Schwelle 0."""
    path = config.inputs['scores']
    scores, truths = read_scores(path)
    print_header(f"ROC: {path}")
    curve = roc(scores, truths)
    counts = ConfusionCounts.from_predictions(truths, np.where(scores >= 0, 1, -1))
    m = metrics(counts)

    out = config.output_dir
    write_roc(curve.thresholds, curve.fpr, curve.tpr, out / 'roc.csv')
    plot_roc_curves({Path(path).stem: curve}, out / 'roc.png', title=f"ROC {Path(path).stem}")
    save_json({
        'format': 'oblique-metrics v1',
        'counts': {'tp': counts.tp, 'tn': counts.tn, 'fp': counts.fp, 'fn': counts.fn},
        'sensitivity': m.sensitivity,
        'specificity': m.specificity,
        'accuracy': m.accuracy,
        'auc': curve.auc,
    }, out / 'metrics.json')

    print(f"Samples:      {len(scores)}")
    print(f"Sensitivity:  {_fmt_metric(m.sensitivity)}")
    print(f"Specificity:  {_fmt_metric(m.specificity)}")
    print(f"Accuracy:     {_fmt_metric(m.accuracy)}")
    print(f"AUC:          {curve.auc:.4f}")
    print(f"\n💾 ROC saved to: {out / 'roc.csv'}")


def cmd_evaluate(config: RunConfig) -> None:
    """Kernel-Vergleich über wiederholte Splits."""
    inputs = config.inputs
    table = merge_tables([read_descriptors(path) for path in inputs['descriptors']])
    truths = table.truths()
    pos = table.values[truths == 1]
    neg = table.values[truths == -1]

    specs = {}
    for kind in inputs['kernels']:
        specs[kind] = replace(config.kernel, kind=kind)

    print_header(f"EVALUATING {len(specs)} KERNELS ({inputs['n_splits']} splits, {inputs['n_test']} test/class)")
    evaluations = compare_kernels(pos, neg, specs, n_test=inputs['n_test'], n_splits=inputs['n_splits'],
                                  rng_seed=config.seed, box_c=config.box_c,
                                  workers=config.workers, verbose=True)

    out = config.output_dir
    curves = {}
    report = {'format': 'oblique-evaluation v1', 'kernels': {}}
    for name, evaluation in evaluations.items():
        pooled = evaluation.pooled_roc()
        curves[name] = pooled
        write_scores(np.concatenate([r.scores for r in evaluation.results]),
                     np.concatenate([r.truths for r in evaluation.results]), out / f"scores_{name}.csv")
        report['kernels'][name] = {
            'spec': evaluation.spec.to_dict(),
            'summary': {k: {'mean': v[0], 'std': v[1]} for k, v in evaluation.summary().items()},
            'pooled_auc': pooled.auc,
        }
    plot_roc_curves(curves, out / 'roc_kernels.png', title='Kernel comparison')
    save_json(report, out / 'evaluation.json')

    print()
    for line in summary_lines(list(evaluations.values())):
        print(line)
    print(f"\n💾 Evaluation saved to: {out / 'evaluation.json'}")


HANDLERS = {
    'synth': cmd_synth,
    'extract': cmd_extract,
    'train': cmd_train,
    'validate': cmd_validate,
    'conflate': cmd_conflate,
    'roc': cmd_roc,
    'evaluate': cmd_evaluate,
}


# --- Argumente ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--output', type=Path, default=None,
                        help=f'Output-Verzeichnis (Standard: ${OUTPUT_ENV} oder ./output)')
    common.add_argument('--workers', type=int, default=os.cpu_count() or 1,
                        help='Anzahl paralleler Prozesse (Standard: alle Kerne)')
    common.add_argument('--seed', type=int, default=None,
                        help='Seed für Zufallszahlen (Standard: Seed des Rezepts, sonst 0)')

    descriptor = argparse.ArgumentParser(add_help=False)
    descriptor.add_argument('--sigma-s', type=float, default=SIGMA_S,
                            help=f'Glättung sigma_s in Pixeln (Standard: {SIGMA_S})')
    descriptor.add_argument('--patch-size', type=int, default=PATCH_SIZE,
                            help=f'Fenstergröße in Pixeln (Standard: {PATCH_SIZE})')
    descriptor.add_argument('--color-center', choices=COLOR_CENTERS, default='median',
                            help='Bezugspunkt der Farbmomente (Standard: median)')
    descriptor.add_argument('--spacing', type=float, default=SPACING_PX,
                            help=f'Abstand der Abtastpunkte in Pixeln (Standard: {SPACING_PX:g})')

    kernel = argparse.ArgumentParser(add_help=False)
    kernel.add_argument('--kernel', choices=KERNEL_KINDS, default='rbf_gaussian',
                        help='Kernel (Standard: rbf_gaussian)')
    kernel.add_argument('--sigma', type=float, default=RBF_SIGMA,
                        help=f'RBF-Breite sigma (Standard: {RBF_SIGMA})')
    kernel.add_argument('--box-c', type=float, default=BOX_C,
                        help=f'Box-Constraint C (Standard: {BOX_C})')

    judge = argparse.ArgumentParser(add_help=False)
    judge.add_argument('--scene', type=Path, required=True, help='Szenen-JSON')
    judge.add_argument('--image', type=Path, required=True, help='Bild (PNG)')
    judge.add_argument('--model', type=Path, required=True, help='Modelldatei')

    parser = argparse.ArgumentParser(
        description='Oblique Vector Validator - Straßenvektoren gegen Schrägluftbilder prüfen',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetische Szene mit 30 px Vektorversatz erzeugen
  %(prog)s synth --offset-px 30 --output out/scene1

  # Deskriptoren der gelabelten Abtastpunkte
  %(prog)s extract --image out/scene1/image.png --samples out/scene1/samples.csv --output out/scene1

  # Modell trainieren
  %(prog)s train --descriptors out/scene1/descriptors.csv --output out/model

  # Straßen prüfen und korrigieren
  %(prog)s validate --scene out/scene1/scene.json --image out/scene1/image.png --model out/model/model.json
  %(prog)s conflate --scene out/scene1/scene.json --image out/scene1/image.png --model out/model/model.json

  # Kernel vergleichen, ROC aus Scores
  %(prog)s evaluate --descriptors out/*/descriptors.csv --kernels rbf_gaussian,linear
  %(prog)s roc --scores output/scores_rbf_gaussian.csv
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common, descriptor], help='Synthetische Szene rendern und labeln')
    p.add_argument('--recipe', type=Path, help='Rezept-JSON (Standard: eingebautes Rezept)')
    p.add_argument('--offset-px', type=float, default=0.0, help='Seitlicher Vektorversatz in Pixeln')
    p.add_argument('--roads', type=str, help='Nur diese Straßen versetzen (kommagetrennt)')
    p.add_argument('--delete-building', action='append', help='Gebäude aus den Daten entfernen (mehrfach)')
    p.add_argument('--dem-bias', type=float, default=0.0, help='DEM-Fehler in Metern')
    p.add_argument('--yaw', type=float, default=0.0, help='Kursfehler der Kamera in Grad')
    p.add_argument('--n-pos', type=int, help='Anzahl positiver Abtastpunkte (Standard: alle)')
    p.add_argument('--n-neg', type=int, help='Anzahl negativer Abtastpunkte (Standard: wie positiv)')

    p = sub.add_parser('extract', parents=[common, descriptor], help='Deskriptoren extrahieren')
    p.add_argument('--image', type=Path, required=True, help='Bild (PNG)')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--scene', type=Path, help='Szenen-JSON (Abtastung entlang aller Straßen)')
    source.add_argument('--samples', type=Path, help='Gelabelte Abtastpunkte (samples.csv)')

    p = sub.add_parser('train', parents=[common, kernel], help='SVM trainieren')
    p.add_argument('--descriptors', type=Path, nargs='+', required=True, help='Deskriptor-Dumps')

    sub.add_parser('validate', parents=[common, descriptor, judge], help='Straßen prüfen')

    p = sub.add_parser('conflate', parents=[common, descriptor, judge], help='Inkonsistente Straßen korrigieren')
    p.add_argument('--half-length', type=float, default=HALF_LENGTH_PX,
                   help=f'Halbe Länge der Suchlinien in Pixeln (Standard: {HALF_LENGTH_PX:g})')
    p.add_argument('--step', type=float, default=STEP_PX,
                   help=f'Schrittweite auf den Suchlinien in Pixeln (Standard: {STEP_PX:g})')

    p = sub.add_parser('roc', parents=[common], help='ROC-Kurve aus Score-Datei')
    p.add_argument('--scores', type=Path, required=True, help='Score-Datei (score, truth)')

    p = sub.add_parser('evaluate', parents=[common, kernel], help='Kernel über viele Splits vergleichen')
    p.add_argument('--descriptors', type=Path, nargs='+', required=True, help='Deskriptor-Dumps')
    p.add_argument('--kernels', type=str, default='rbf_gaussian,linear',
                   help='Kommagetrennte Kernel-Arten (Standard: rbf_gaussian,linear)')
    p.add_argument('--n-test', type=int, default=N_TEST, help=f'Testgröße pro Klasse (Standard: {N_TEST})')
    p.add_argument('--n-splits', type=int, default=N_SPLITS, help=f'Anzahl Splits (Standard: {N_SPLITS})')
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    """
    Baut die RunConfig und prüft Wertebereiche und Eingabedateien.

    Raises:
        ValueError: mit lesbarer Meldung
    """
    if args.workers < 1:
        raise ValueError("--workers muss >= 1 sein")

    descriptor = DescriptorParams()
    spacing = SPACING_PX
    if hasattr(args, 'sigma_s'):
        if not args.sigma_s > 0:
            raise ValueError("--sigma-s muss > 0 sein")
        if args.patch_size < 4:
            raise ValueError("--patch-size muss >= 4 sein")
        if not args.spacing > 0:
            raise ValueError("--spacing muss > 0 sein")
        descriptor = DescriptorParams(sigma_s=args.sigma_s, patch_size=args.patch_size,
                                      color_center=args.color_center)
        spacing = args.spacing

    kernel = KernelSpec()
    box_c = BOX_C
    if hasattr(args, 'kernel'):
        if not args.box_c > 0:
            raise ValueError("--box-c muss > 0 sein")
        try:
            kernel = KernelSpec(kind=args.kernel, sigma=args.sigma)
        except KernelError as e:
            raise ValueError(str(e)) from e
        box_c = args.box_c

    conflation = ConflationParams(descriptor=descriptor)
    if args.command == 'conflate':
        if not args.half_length > 0 or not 0 < args.step <= args.half_length:
            raise ValueError("--half-length > 0 und 0 < --step <= --half-length erwartet")
        conflation = ConflationParams(half_length_px=args.half_length, step_px=args.step, descriptor=descriptor)

    inputs: Dict[str, object] = {}
    files: List[Path] = []
    for name in ('recipe', 'scene', 'image', 'model', 'samples', 'scores'):
        value = getattr(args, name, None)
        if value is not None:
            inputs[name] = value
            files.append(value)
    if getattr(args, 'descriptors', None):
        inputs['descriptors'] = list(args.descriptors)
        files.extend(args.descriptors)
    for path in files:
        if not path.exists():
            raise ValueError(f"Datei nicht gefunden: {path}")

    if args.command == 'synth':
        for name in ('n_pos', 'n_neg'):
            value = getattr(args, name)
            if value is not None and value < 1:
                raise ValueError(f"--{name.replace('_', '-')} muss >= 1 sein")
        inputs.update({
            'offset_px': args.offset_px,
            'roads': [r.strip() for r in args.roads.split(',')] if args.roads else [],
            'delete_building': args.delete_building or [],
            'dem_bias': args.dem_bias,
            'yaw': args.yaw,
            'n_pos': args.n_pos,
            'n_neg': args.n_neg,
        })
    if args.command == 'evaluate':
        kinds = [k.strip() for k in args.kernels.split(',') if k.strip()]
        invalid = [k for k in kinds if k not in KERNEL_KINDS]
        if not kinds or invalid:
            raise ValueError(f"Ungültige Kernel: {', '.join(invalid) or '(keine)'} "
                             f"(erlaubt: {', '.join(KERNEL_KINDS)})")
        if args.n_test < 1 or args.n_splits < 1:
            raise ValueError("--n-test und --n-splits müssen >= 1 sein")
        inputs.update({'kernels': kinds, 'n_test': args.n_test, 'n_splits': args.n_splits})

    return RunConfig(
        command=args.command,
        output_dir=args.output or default_output_dir(),
        inputs=inputs,
        descriptor=descriptor,
        spacing_px=spacing,
        kernel=kernel,
        box_c=box_c,
        conflation=conflation,
        rng_seed=args.seed,
        workers=args.workers,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Hauptfunktion - CLI Entry Point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = run_config(args)
    except ValueError as e:
        print(f"❌ {e}")
        return 1

    # Start
    print("\n🚀 Oblique Vector Validator")
    print(f"📅 {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    try:
        HANDLERS[config.command](config)
        print_header(f"✅ {config.command.upper()} COMPLETED")
        return 0

    except KeyboardInterrupt:
        print("\n\n⚠️  Aborted by user")
        return 130

    except MODULE_ERRORS as e:
        print(f"\n\n❌ {config.command}: {e}")
        return 1

    except Exception as e:
        print(f"\n\n❌ ERROR ({config.command}): {str(e)}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
