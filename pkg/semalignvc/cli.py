#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Command-line front end.

Usage
-----
    semalignvc stage <stage> --config FILE [--run-dir DIR] [--force]
    semalignvc run --config FILE [--run-dir DIR] [--force]
    semalignvc corpus synth --out DIR --speakers N --utts-per-speaker M --seed S
    semalignvc lm train --config FILE
    semalignvc lm generate --src WAV --ref WAV --out TOKENS --config FILE
    semalignvc acoustic train --config FILE
    semalignvc vc convert --src WAV --ref WAV --out WAV --config FILE
    semalignvc probe run --source {tokenizer,qphi,encoder} --manifest FILE --report OUT --config FILE
    semalignvc eval run --pairs FILE --report OUT --config FILE

Commands other than ``corpus synth`` work on the checkpoints of a run directory
(``--run-dir``, ``[Pipeline] run-dir`` or ``$SEMALIGNVC_RUN_DIR``).
"""

import argparse
import json
import logging
import os
import sys

from semalignvc import __version__
from semalignvc.conf import ConfigLoader
from semalignvc.core.corpus import DEFAULT_ALPHABET, SynthHandler, build_toy_corpus, load_manifest, split_by_speaker
from semalignvc.core.features import FeatureConfig, FeatureHandler
from semalignvc.core.quantizer import RandomQuantizer
from semalignvc.errors import CheckpointError, ProviderError, StageError, VocoderError
from semalignvc.models.acoustic import VCModels, convert_files, predict_tokens
from semalignvc.models.probe import (ProbeSpec, SemanticRepresentation, TokenRepresentation, render_table, report,
                                     train_probe)
from semalignvc.pipeline import STAGES, PipelineConfig, PipelineRun, run_pipeline, run_stage
from semalignvc.specutils.evalkit import (DNSMOSCommand, evaluate_pairs, get_embedding_providers, render_eval_table,
                                          summarize)
from semalignvc.utils import make_dir, read_wav

__all__ = ['build_parser', 'main']

logger = logging.getLogger(__name__)

PROBE_SOURCES = ('tokenizer', 'qphi', 'encoder')
CONVERSION_CHECKPOINTS = ('tokenizer', 'semenc', 'semlm', 'acoustic')


def _pipeline_config(args):
    return PipelineConfig.from_file(args.config, run_dir=args.run_dir)


def _run_args(parser):
    parser.add_argument('--config', help="INI settings overlaid on the defaults")
    parser.add_argument('--run-dir', help="run directory (default: [Pipeline] run-dir or $SEMALIGNVC_RUN_DIR)")
    parser.add_argument('--force', action='store_true',
                        help="rerun completed stages and accept checkpoints written with other settings")


def _load_models(run):
    paths = dict((name, run.checkpoint(name)) for name in CONVERSION_CHECKPOINTS)
    return VCModels.load(paths, run.settings)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stage(args):
    run_stage(args.stage, _pipeline_config(args), force=args.force)


def cmd_run(args):
    run_pipeline(_pipeline_config(args), force=args.force)


def cmd_corpus_synth(args):
    records, _ = build_toy_corpus(args.speakers, args.utts_per_speaker, args.seed, alphabet=args.alphabet)
    SynthHandler(args.out, workers=args.workers).process(records)


def cmd_lm_train(args):
    run_stage('lm-train', _pipeline_config(args), force=args.force)


def cmd_lm_generate(args):
    config = _pipeline_config(args)
    run = PipelineRun(config, force=args.force)
    models = _load_models(run)
    rate = models.feature_config.sample_rate
    result, _, _ = predict_tokens(read_wav(args.src, rate), read_wav(args.ref, rate), models, seed=args.seed)
    with open(args.out, 'w') as fout:
        fout.write(' '.join(str(int(t)) for t in result.tokens.ids) + '\n')
    logger.info("wrote {} tokens to {}{}".format(len(result.tokens), args.out,
                                                  ' (truncated)' if result.truncated else ''))


def cmd_acoustic_train(args):
    run_stage('acoustic-train', _pipeline_config(args), force=args.force)


def cmd_vc_convert(args):
    config = _pipeline_config(args)
    run = PipelineRun(config, force=args.force)
    models = _load_models(run)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    make_dir(out_dir)
    convert_files(args.src, args.ref, args.out, models, config.section('vocoder'), seed=args.seed)


def _representation(run, source):
    if source == 'tokenizer':
        return TokenRepresentation(RandomQuantizer.load(run.checkpoint('quantizer')))
    tokenizer = run.tokenizer()
    if source == 'encoder':
        if isinstance(tokenizer, RandomQuantizer):
            raise CheckpointError("probe source 'encoder' needs [Quantizer] token-source = encoder")
        return TokenRepresentation(tokenizer)
    return SemanticRepresentation(run.semenc().cpu(), tokenizer=tokenizer)


def cmd_probe_run(args):
    config = _pipeline_config(args)
    run = PipelineRun(config, force=args.force)
    probe_sect = config.section('probe')
    records = load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    features = FeatureHandler(config.feature_config, root=root, workers=config.workers).process(records)
    seed = config.seed_for('probe')
    train, test = split_by_speaker(features, probe_sect.get('test-fraction', 0.2), seed, key=lambda f: f.utt_id)
    rep = _representation(run, args.source)
    spec = ProbeSpec.for_representation(rep, len(set(f.speaker_id for f in train)), d=probe_sect.get('d', 128))
    probe = train_probe(spec, rep, train, epochs=probe_sect.get('epochs', 5), lr=probe_sect.get('lr', 1e-3),
                        batch_size=probe_sect.get('batch-size', 16), seed=seed)
    probe_report = report(probe, test)
    table = render_table([probe_report])
    with open(args.report, 'w') as fout:
        fout.write(probe_report.to_text())
        fout.write('\n' + table + '\n')
    logger.info("speaker probe:\n{}".format(table))


def cmd_eval_run(args):
    loader = ConfigLoader()
    settings = loader.update_config(args.config) if args.config else loader.settings
    feature_config = FeatureConfig.from_settings(settings)
    eval_sect = settings.get('eval', {})
    with open(args.pairs) as fin:
        pairs = [json.loads(line) for line in fin if line.strip()]
    providers = get_embedding_providers(settings, feature_config)
    naturalness = DNSMOSCommand(eval_sect['dnsmos-command']) if eval_sect.get('dnsmos-command') else None
    df = evaluate_pairs(pairs, providers, feature_config, naturalness=naturalness)
    eval_report = summarize(df)
    table = render_eval_table(eval_report)
    with open(args.report, 'w') as fout:
        fout.write(eval_report.to_text())
        fout.write('\n' + table + '\n')
    logger.info("evaluation:\n{}".format(table))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='semalignvc',
                                     description="Zero-shot voice conversion with semantic alignment.")
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    parser.add_argument('-v', '--verbose', action='store_true', help="show DEBUG messages")
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    p = commands.add_parser('stage', help="run one pipeline stage")
    p.add_argument('stage', choices=STAGES)
    _run_args(p)
    p.set_defaults(func=cmd_stage)

    p = commands.add_parser('run', help="run the configured pipeline stages in order")
    _run_args(p)
    p.set_defaults(func=cmd_run)

    corpus = commands.add_parser('corpus', help="toy corpus").add_subparsers(dest='action', metavar='ACTION')
    corpus.required = True
    p = corpus.add_parser('synth', help="render a toy corpus to WAV files and a manifest")
    p.add_argument('--out', required=True)
    p.add_argument('--speakers', type=int, default=20)
    p.add_argument('--utts-per-speaker', type=int, default=100)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--alphabet', default=DEFAULT_ALPHABET)
    p.add_argument('--workers', type=int, default=1)
    p.set_defaults(func=cmd_corpus_synth)

    lm = commands.add_parser('lm', help="semantic language model").add_subparsers(dest='action', metavar='ACTION')
    lm.required = True
    p = lm.add_parser('train', help="run the lm-train stage")
    _run_args(p)
    p.set_defaults(func=cmd_lm_train)
    p = lm.add_parser('generate', help="write the audio tokens generated for a source and a reference")
    p.add_argument('--src', required=True)
    p.add_argument('--ref', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, default=0)
    _run_args(p)
    p.set_defaults(func=cmd_lm_generate)

    acoustic = commands.add_parser('acoustic', help="acoustic model").add_subparsers(dest='action', metavar='ACTION')
    acoustic.required = True
    p = acoustic.add_parser('train', help="run the acoustic-train stage")
    _run_args(p)
    p.set_defaults(func=cmd_acoustic_train)

    vc = commands.add_parser('vc', help="voice conversion").add_subparsers(dest='action', metavar='ACTION')
    vc.required = True
    p = vc.add_parser('convert', help="convert a WAV file to the voice of a reference WAV file")
    p.add_argument('--src', required=True)
    p.add_argument('--ref', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, default=0)
    _run_args(p)
    p.set_defaults(func=cmd_vc_convert)

    probe = commands.add_parser('probe', help="speaker probes").add_subparsers(dest='action', metavar='ACTION')
    probe.required = True
    p = probe.add_parser('run', help="train and test a speaker probe on a manifest")
    p.add_argument('--source', choices=PROBE_SOURCES, required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--report', required=True)
    _run_args(p)
    p.set_defaults(func=cmd_probe_run)

    ev = commands.add_parser('eval', help="conversion metrics").add_subparsers(dest='action', metavar='ACTION')
    ev.required = True
    p = ev.add_parser('run', help="evaluate converted pairs")
    p.add_argument('--pairs', required=True, help="JSON lines with source, reference and converted paths")
    p.add_argument('--report', required=True)
    p.add_argument('--config', help="INI settings overlaid on the defaults")
    p.set_defaults(func=cmd_eval_run)
    return parser


def main(argv=None):
    """Entry point of the ``semalignvc`` console command; returns the exit status."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger('semalignvc').setLevel(logging.DEBUG)
    try:
        args.func(args)
    except (ValueError, IOError, StageError, CheckpointError, ProviderError, VocoderError) as err:
        logger.error(str(err))
        return 1
    except KeyboardInterrupt:
        logger.error("interrupted")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
