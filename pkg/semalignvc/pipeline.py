#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Pipeline stages and the run directory.

A run directory holds one sub-directory per stage::

    run_dir/
        checkpoints.json        quantizer, tokenizer, semenc, semlm, acoustic entries
        semalignvc.log
        corpus/                 wavs/, manifest.jsonl, train.jsonl, test.jsonl
        tokenize/               features/ (cache), quantizer.json, [encoder.pt]
        semenc-train/           semenc.pt, history.csv, alignments/
        lm-train/               semlm.pt, history.csv
        acoustic-train/         acoustic.pt, history.csv
        convert/                wavs/, pairs.jsonl, identity.jsonl
        probe/                  report_<source>.txt, table.txt, reports.json, [semenc_ctc_only.pt]
        pca/                    pca.csv, summary.json, plots/
        eval/                   pairs.csv, identity.csv, speaker_probe.txt, report.txt, summary.json, table.txt

Every stage writes ``<stage>/stage.json`` with the fingerprint of the settings it
depends on. Running a stage again with the same settings is a no-op.

Examples
--------
>>> from semalignvc.pipeline import PipelineConfig, run_pipeline
>>> config = PipelineConfig.from_file('toy.ini', run_dir='/tmp/toy_run')
>>> run_pipeline(config)
"""

import json
import logging
import os
import time
from collections import OrderedDict

import numpy as np
import pandas as pd
import torch
from filelock import FileLock, Timeout

from semalignvc.conf import ConfigLoader
from semalignvc.core.corpus import (DEFAULT_ALPHABET, SynthHandler, UtteranceRecord, build_toy_corpus, load_manifest,
                                    split_by_speaker, write_manifest)
from semalignvc.core.features import FeatureCache, FeatureConfig, FeatureHandler
from semalignvc.core.quantizer import RandomQuantizer, build_quantizer, quantize
from semalignvc.core.textref import get_text_provider
from semalignvc.errors import CheckpointError, StageError
from semalignvc.logging import change_log_file, log_stage
from semalignvc.models.acoustic import (AcousticConfig, AcousticExample, AcousticModel, AcousticTrainConfig,
                                        AcousticTrainer, VCModels, convert_files, save_acoustic)
from semalignvc.models.encoder import load_masked_encoder, save_masked_encoder, train_masked_encoder
from semalignvc.models.probe import (ProbeSpec, SemanticRepresentation, TokenRepresentation, render_table, report,
                                     train_probe)
from semalignvc.models.semenc import (EncoderConfig, SemEncModel, SemEncTrainConfig, SemEncTrainer, align_to_text,
                                      build_examples, dump_alignments, load_semenc, save_semenc)
from semalignvc.models.semlm import LMConfig, LMTrainConfig, LMTrainer, SemanticLM, build_lm_examples, save_semlm
from semalignvc.specutils.evalkit import (DNSMOSCommand, conversion_speaker_report, evaluate_pairs,
                                          get_embedding_providers, pca_compare, render_eval_table, summarize)
from semalignvc.utils import derive_seed, fingerprint, load_json, make_dir, save_json, timeit

__all__ = ['STAGES', 'RUN_DIR_ENV', 'PipelineConfig', 'CheckpointSet', 'PipelineRun', 'run_stage', 'run_pipeline']

logger = logging.getLogger(__name__)

RUN_DIR_ENV = 'SEMALIGNVC_RUN_DIR'

STAGES = ('corpus', 'tokenize', 'semenc-train', 'lm-train', 'acoustic-train', 'convert', 'probe', 'pca', 'eval')

UPSTREAM = {
    'corpus': (),
    'tokenize': ('corpus',),
    'semenc-train': ('tokenize',),
    'lm-train': ('semenc-train',),
    'acoustic-train': ('tokenize',),
    'convert': ('lm-train', 'acoustic-train'),
    'probe': ('semenc-train',),
    'pca': ('semenc-train',),
    'eval': ('convert',),
}

# settings sections each stage depends on (besides its upstream stages)
STAGE_SECTIONS = {
    'corpus': ('corpus', 'features'),
    'tokenize': ('features', 'quantizer'),
    'semenc-train': ('text', 'align', 'semenc'),
    'lm-train': ('lm',),
    'acoustic-train': ('acoustic',),
    'convert': ('lm', 'acoustic', 'vocoder', 'eval'),
    'probe': ('probe',),
    'pca': ('align',),
    'eval': ('eval',),
}

# checkpoint name -> stage producing it
CHECKPOINT_STAGES = OrderedDict([
    ('quantizer', 'tokenize'),
    ('tokenizer', 'tokenize'),
    ('semenc', 'semenc-train'),
    ('semlm', 'lm-train'),
    ('acoustic', 'acoustic-train'),
])


class PipelineConfig(object):
    """Settings of a run: module sections, root seed, run directory and stages.

    Parameters
    ----------
    settings : dict
        Nested settings as returned by :class:`semalignvc.conf.ConfigLoader`.
    run_dir : str, optional
        Overrides ``[Pipeline] run-dir`` and ``$SEMALIGNVC_RUN_DIR``.
    """

    def __init__(self, settings, run_dir=None):
        self.settings = settings
        pipe = settings.get('pipeline', {})
        self.seed = int(pipe.get('seed', 0))
        self.workers = int(pipe.get('workers', 1))
        self.device = pipe.get('device', 'cpu')
        run_dir = run_dir or pipe.get('run-dir') or os.environ.get(RUN_DIR_ENV)
        if not run_dir:
            raise ValueError("no run directory: pass one, set [Pipeline] run-dir or ${}".format(RUN_DIR_ENV))
        self.run_dir = os.path.abspath(os.path.expanduser(run_dir))
        self.stages = [s.strip() for s in pipe.get('stages', ','.join(STAGES)).split(',') if s.strip()]
        self.feature_config = FeatureConfig.from_settings(settings)

    @classmethod
    def from_file(cls, config_file=None, run_dir=None):
        """Default settings overlaid with `config_file`."""
        loader = ConfigLoader()
        settings = loader.update_config(config_file) if config_file else loader.settings
        return cls(settings, run_dir=run_dir)

    def section(self, name):
        return self.settings.get(name, {})

    def validate(self):
        """Check the settings before any work.

        Raises
        ------
        ValueError
            Listing every problem found.
        """
        problems = []
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            problems.append("unknown stages: {}".format(', '.join(unknown)))
        manifest = self.section('corpus').get('manifest')
        if manifest and not os.path.isfile(manifest):
            problems.append("manifest {} does not exist".format(manifest))
        quant = self.section('quantizer')
        if quant.get('stack', 2) < 1 or quant.get('codebook-size', 512) < 2:
            problems.append("[Quantizer] needs stack >= 1 and codebook-size >= 2")
        if quant.get('token-source', 'quantizer') not in ('quantizer', 'encoder'):
            problems.append("[Quantizer] token-source should be quantizer or encoder")
        text = self.section('text')
        if text.get('text-provider', 'toy') not in ('toy', 'external'):
            problems.append("[Text] text-provider should be toy or external")
        if text.get('text-provider', 'toy') == 'external' and not os.path.isdir(text.get('model-dir') or ''):
            problems.append("[Text] model-dir {} does not exist".format(text.get('model-dir')))
        if self.section('lm').get('sampler', 'greedy') not in ('greedy', 'top-k'):
            problems.append("[LM] sampler should be greedy or top-k")
        vocoder = self.section('vocoder')
        if vocoder.get('mode', 'pseudo_inverse_phase_recon') not in ('pseudo_inverse_phase_recon', 'external'):
            problems.append("[Vocoder] mode should be pseudo_inverse_phase_recon or external")
        if vocoder.get('mode') == 'external' and not vocoder.get('command'):
            problems.append("[Vocoder] external mode needs a command")
        if self.feature_config.fmax > self.feature_config.sample_rate / 2.0:
            problems.append("[Features] fmax above the Nyquist frequency")
        if problems:
            raise ValueError("invalid configuration:\n  " + "\n  ".join(problems))

    def seed_for(self, name):
        """Seed of the named substream of the root seed."""
        return derive_seed(self.seed, name)

    def stage_fingerprint(self, stage):
        payload = {
            'stage': stage,
            'seed': self.seed,
            'sections': dict((sec, self.section(sec)) for sec in STAGE_SECTIONS[stage]),
            'upstream': [self.stage_fingerprint(up) for up in UPSTREAM[stage]],
        }
        return fingerprint(payload)

    def stage_dir(self, stage):
        return os.path.join(self.run_dir, stage)


class CheckpointSet(object):
    """Checkpoint registry of a run, stored in ``run_dir/checkpoints.json``.

    Each entry holds the path (relative to the run directory), the fingerprint of the
    stage that wrote it and the training step count.
    """

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.filename = os.path.join(run_dir, 'checkpoints.json')
        self.entries = load_json(self.filename) if os.path.isfile(self.filename) else {}

    def register(self, name, path, fingerprint, step=0):
        if name not in CHECKPOINT_STAGES:
            raise ValueError("unknown checkpoint '{}'".format(name))
        self.entries[name] = {'path': os.path.relpath(path, self.run_dir), 'fingerprint': fingerprint,
                              'step': int(step)}
        save_json(self.entries, self.filename)

    def path(self, name, fingerprint=None, force=False):
        """Absolute path of checkpoint `name`.

        Raises
        ------
        CheckpointError
            Missing entry or file, or a fingerprint that differs from `fingerprint`
            (only a warning with `force`).
        """
        entry = self.entries.get(name)
        if entry is None:
            raise CheckpointError("no '{}' checkpoint in {}; run stage '{}' first".format(
                name, self.run_dir, CHECKPOINT_STAGES.get(name, name)))
        path = os.path.join(self.run_dir, entry['path'])
        if not os.path.exists(path):
            raise CheckpointError("'{}' checkpoint {} is missing".format(name, path))
        if fingerprint is not None and entry['fingerprint'] != fingerprint:
            msg = "'{}' checkpoint {} was written with other settings".format(name, path)
            if not force:
                raise CheckpointError(msg + " (rerun stage '{}' or use --force)".format(CHECKPOINT_STAGES[name]))
            logger.warning(msg + ", loading anyway (--force)")
        return path

    def fingerprint(self, name):
        entry = self.entries.get(name)
        return None if entry is None else entry['fingerprint']


class PipelineRun(object):
    """One pipeline invocation: settings, run directory, checkpoints and the `force` flag."""

    def __init__(self, config, force=False):
        self.config = config
        self.force = force
        make_dir(config.run_dir)
        self.checkpoints = CheckpointSet(config.run_dir)

    @property
    def settings(self):
        return self.config.settings

    @property
    def stack(self):
        return self.config.section('quantizer').get('stack', 2)

    def path(self, stage, *parts):
        return os.path.join(self.config.stage_dir(stage), *parts)

    def checkpoint(self, name):
        expected = self.config.stage_fingerprint(CHECKPOINT_STAGES[name])
        return self.checkpoints.path(name, fingerprint=expected, force=self.force)

    # ---------------------------------------------------------------- data

    def records(self, split='manifest'):
        return load_manifest(self.path('corpus', '{}.jsonl'.format(split)))

    def tokenizer(self):
        path = self.checkpoint('tokenizer')
        return RandomQuantizer.load(path) if path.endswith('.json') else load_masked_encoder(path)

    def features(self, split='train'):
        """Tokenized features of a corpus split, from the tokenize cache."""
        cache = FeatureCache(self.path('tokenize', 'features'), self.config.feature_config)
        tokens_fp = self.checkpoints.fingerprint('tokenizer')
        out = []
        for rec in self.records(split):
            feats = cache.load(rec.id, tokens_fingerprint=tokens_fp)
            if feats is None or feats.tokens is None:
                raise StageError('tokenize', "no cached tokens for '{}'; rerun the tokenize stage".format(rec.id))
            out.append(feats)
        return out

    def semenc(self):
        return load_semenc(self.checkpoint('semenc')).to(self.config.device)

    def text_provider(self):
        return get_text_provider(self.settings, seed=self.config.seed)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _save_history(history, filename):
    df = pd.DataFrame(history if history and isinstance(history[0], dict) else {'loss': history})
    df.index.name = 'step'
    df.to_csv(filename)


def _stage_corpus(run):
    cfg = run.config
    out_dir = cfg.stage_dir('corpus')
    corpus = cfg.section('corpus')
    if corpus.get('manifest'):
        root = os.path.dirname(os.path.abspath(corpus['manifest']))
        source = []
        for rec in load_manifest(corpus['manifest']):
            if rec.audio_path is not None and not os.path.isabs(rec.audio_path):
                rec = UtteranceRecord(rec.id, rec.text, rec.speaker_id, audio_path=os.path.join(root, rec.audio_path))
            source.append(rec)
    else:
        source, _ = build_toy_corpus(corpus.get('speakers', 20), corpus.get('utts-per-speaker', 100), cfg.seed,
                                     min_symbols=corpus.get('min-symbols', 6),
                                     max_symbols=corpus.get('max-symbols', 12),
                                     alphabet=corpus.get('alphabet', DEFAULT_ALPHABET))
    # every utterance ends up as a WAV file under the run directory
    records = SynthHandler(out_dir, workers=cfg.workers, sample_rate=cfg.feature_config.sample_rate).process(source)
    train, test = split_by_speaker(records, corpus.get('test-fraction', 0.2), cfg.seed)
    write_manifest(train, os.path.join(out_dir, 'train.jsonl'))
    write_manifest(test, os.path.join(out_dir, 'test.jsonl'))
    logger.info("corpus: {} train and {} test utterances".format(len(train), len(test)))
    return ['manifest.jsonl', 'train.jsonl', 'test.jsonl']


@timeit
def _stage_tokenize(run):
    cfg = run.config
    quant = cfg.section('quantizer')
    fcfg = cfg.feature_config
    stack = run.stack
    cache_dir = run.path('tokenize', 'features')
    records = run.records('manifest')
    features = FeatureHandler(fcfg, cache_dir=cache_dir, root=cfg.stage_dir('corpus'),
                              workers=cfg.workers).process(records)
    q = build_quantizer(cfg.seed_for('quantizer'), fcfg.n_mels * stack, quant.get('code-dim', 16),
                        quant.get('codebook-size', 512), stack=stack)
    q_path = run.path('tokenize', 'quantizer.json')
    q.save(q_path)
    outputs = ['quantizer.json']
    stage_fp = cfg.stage_fingerprint('tokenize')
    run.checkpoints.register('quantizer', q_path, stage_fp)
    if quant.get('token-source', 'quantizer') == 'encoder':
        train_ids = set(rec.id for rec in run.records('train'))
        encoder, history = train_masked_encoder([f for f in features if f.utt_id in train_ids], q,
                                                steps=quant.get('encoder-steps', 2000), seed=cfg.seed_for('encoder'),
                                                device=cfg.device)
        encoder = encoder.cpu()
        tok_path = run.path('tokenize', 'encoder.pt')
        save_masked_encoder(encoder, tok_path, q.fingerprint(), step=len(history))
        _save_history(history, run.path('tokenize', 'encoder_history.csv'))
        outputs.append('encoder.pt')
        tokenize = encoder.tokenize
    else:
        tok_path = q_path

        def tokenize(mel):
            return quantize(mel, q)

    cache = FeatureCache(cache_dir, fcfg)
    for feats in features:
        feats.tokens = tokenize(feats.mel)
        cache.save(feats, tokens_fingerprint=stage_fp)
    run.checkpoints.register('tokenizer', tok_path, stage_fp)
    return outputs


def _train_semenc(run, examples, train_config):
    """A fresh semantic encoder trained on `examples`; returns the CPU model, its trainer and the loss history."""
    provider = run.text_provider()
    q = RandomQuantizer.load(run.checkpoint('quantizer'))
    torch.manual_seed(train_config.seed)
    model = SemEncModel(EncoderConfig.from_settings(run.settings, q.V, provider.vocab_size, provider.d_text))
    trainer = SemEncTrainer(model, train_config, device=run.config.device)
    history = trainer.train(examples)
    return model.cpu(), trainer, history


@timeit
def _stage_semenc(run):
    cfg = run.config
    provider = run.text_provider()
    examples = build_examples(run.features('train'), provider)
    train_config = SemEncTrainConfig.from_settings(run.settings, seed=cfg.seed_for('semenc'))
    model, trainer, history = _train_semenc(run, examples, train_config)
    path = run.path('semenc-train', 'semenc.pt')
    save_semenc(model, path, provider.provider_id, step=trainer.step)
    run.checkpoints.register('semenc', path, cfg.stage_fingerprint('semenc-train'), step=trainer.step)
    _save_history(history, run.path('semenc-train', 'history.csv'))
    n_dump = cfg.section('align').get('dump-alignments', 4)
    if n_dump:
        dump_dir = run.path('semenc-train', 'alignments')
        make_dir(dump_dir)
        dump_alignments(model, examples[:n_dump], dump_dir, omega=cfg.section('align').get('omega', 1.0))
    return ['semenc.pt', 'history.csv']


@timeit
def _stage_lm(run):
    cfg = run.config
    semenc = run.semenc()
    examples = build_lm_examples(run.features('train'), semenc, run.stack)
    if not examples:
        raise StageError('lm-train', "no utterance is long enough for a reference split")
    seed = cfg.seed_for('lm')
    torch.manual_seed(seed)
    model = SemanticLM(LMConfig.from_settings(run.settings, semenc.config.vocab_size, cfg.feature_config.n_mels,
                                              semenc.config.d))
    trainer = LMTrainer(model, LMTrainConfig.from_settings(run.settings, seed=seed), device=cfg.device)
    history = trainer.train(examples)
    model = model.cpu()
    path = run.path('lm-train', 'semlm.pt')
    save_semlm(model, path, run.checkpoints.fingerprint('semenc'), step=trainer.step)
    run.checkpoints.register('semlm', path, cfg.stage_fingerprint('lm-train'), step=trainer.step)
    _save_history(history, run.path('lm-train', 'history.csv'))
    return ['semlm.pt', 'history.csv']


@timeit
def _stage_acoustic(run):
    cfg = run.config
    stack = run.stack
    q = RandomQuantizer.load(run.checkpoint('quantizer'))
    examples = [AcousticExample(f.utt_id, f.speaker_id, f.mel.frames, f.tokens, stack)
                for f in run.features('train')]
    seed = cfg.seed_for('acoustic')
    torch.manual_seed(seed)
    model = AcousticModel(AcousticConfig.from_settings(run.settings, q.V, cfg.feature_config.n_mels, stack))
    trainer = AcousticTrainer(model, AcousticTrainConfig.from_settings(run.settings, seed=seed), device=cfg.device)
    history = trainer.train(examples)
    model = model.cpu()
    path = run.path('acoustic-train', 'acoustic.pt')
    save_acoustic(model, path, step=trainer.step)
    run.checkpoints.register('acoustic', path, cfg.stage_fingerprint('acoustic-train'), step=trainer.step)
    _save_history(history, run.path('acoustic-train', 'history.csv'))
    return ['acoustic.pt', 'history.csv']


def conversion_pairs(records, n_pairs, seed):
    """Source/reference pairs of different speakers, drawn reproducibly from `records`."""
    speakers = sorted(set(rec.speaker_id for rec in records))
    if len(speakers) < 2:
        raise StageError('convert', "conversion pairs need at least two speakers")
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n_pairs):
        src = records[int(rng.integers(len(records)))]
        others = [rec for rec in records if rec.speaker_id != src.speaker_id]
        pairs.append((src, others[int(rng.integers(len(others)))]))
    return pairs


def _write_jsonl(rows, filename):
    with open(filename, 'w') as fout:
        for row in rows:
            fout.write(json.dumps(row) + '\n')


def _read_jsonl(filename):
    with open(filename) as fin:
        return [json.loads(line) for line in fin if line.strip()]


def _stage_convert(run):
    cfg = run.config
    eval_sect = cfg.section('eval')
    paths = dict((name, run.checkpoint(name)) for name in ('tokenizer', 'semenc', 'semlm', 'acoustic'))
    models = VCModels.load(paths, run.settings)
    corpus_dir = cfg.stage_dir('corpus')
    records = run.records('test')
    seed = cfg.seed_for('convert')
    out_dir = run.path('convert', 'wavs')
    make_dir(out_dir)

    def convert(k, src, ref, name):
        src_path = os.path.join(corpus_dir, src.audio_path)
        ref_path = os.path.join(corpus_dir, ref.audio_path)
        out_path = os.path.join(out_dir, name)
        result = convert_files(src_path, ref_path, out_path, models, cfg.section('vocoder'), seed=seed + k)
        return OrderedDict([('source', src_path), ('reference', ref_path), ('converted', out_path),
                            ('source_speaker', src.speaker_id), ('reference_speaker', ref.speaker_id),
                            ('tokens', len(result.tokens)), ('truncated', result.truncated)])

    pairs = conversion_pairs(records, eval_sect.get('n-pairs', 40), seed)
    _write_jsonl([convert(k, src, ref, '{:04d}_{}__{}.wav'.format(k, src.id, ref.id))
                  for k, (src, ref) in enumerate(pairs)], run.path('convert', 'pairs.jsonl'))
    # the source is its own reference
    rng = np.random.default_rng(cfg.seed_for('convert-identity'))
    n_identity = min(eval_sect.get('n-identity', 10), len(records))
    chosen = [records[i] for i in sorted(rng.choice(len(records), size=n_identity, replace=False))]
    _write_jsonl([convert(len(pairs) + k, src, src, 'identity_{:04d}_{}.wav'.format(k, src.id))
                  for k, src in enumerate(chosen)], run.path('convert', 'identity.jsonl'))
    return ['pairs.jsonl', 'identity.jsonl']


CTC_ONLY_LABEL = 'qphi (CTC only)'


def _ctc_only_semenc(run):
    """Semantic encoder trained like the main one but on the CTC loss alone."""
    cfg = run.config
    train_config = SemEncTrainConfig.from_settings(run.settings, seed=cfg.seed_for('semenc-ctc-only'))
    train_config.lambda_sem = 0.0
    train_config.lambda_fs = 0.0
    examples = build_examples(run.features('train'), run.text_provider())
    logger.info("training the CTC-only semantic encoder for the probe table")
    model, trainer, history = _train_semenc(run, examples, train_config)
    save_semenc(model, run.path('probe', 'semenc_ctc_only.pt'), run.text_provider().provider_id, step=trainer.step)
    _save_history(history, run.path('probe', 'history_ctc_only.csv'))
    return model


@timeit
def _stage_probe(run):
    cfg = run.config
    probe_sect = cfg.section('probe')
    features = run.features('train') + run.features('test')
    train, test = split_by_speaker(features, probe_sect.get('test-fraction', 0.2), cfg.seed_for('probe'),
                                   key=lambda f: f.utt_id)
    n_speakers = len(set(f.speaker_id for f in train))
    tokens = TokenRepresentation(run.tokenizer())
    rows = [(tokens.name, tokens, False), ('qphi', SemanticRepresentation(run.semenc().cpu()), False)]
    outputs = ['table.txt', 'reports.json']
    if probe_sect.get('ctc-only-ablation', True):
        rows.append((CTC_ONLY_LABEL, SemanticRepresentation(_ctc_only_semenc(run), name='qphi-ctc-only'), False))
        outputs += ['semenc_ctc_only.pt', 'history_ctc_only.csv']
    # label-permutation control on the tokens
    rows.append(('{} (shuffled labels)'.format(tokens.name), tokens, True))
    kwargs = dict(epochs=probe_sect.get('epochs', 5), lr=probe_sect.get('lr', 1e-3),
                  batch_size=probe_sect.get('batch-size', 16), seed=cfg.seed_for('probe'))
    reports = OrderedDict()
    for label, rep, shuffled in rows:
        spec = ProbeSpec.for_representation(rep, n_speakers, d=probe_sect.get('d', 128))
        reports[label] = report(train_probe(spec, rep, train, shuffle_labels=shuffled, **kwargs), test)
        if not shuffled:
            with open(run.path('probe', 'report_{}.txt'.format(rep.name)), 'w') as fout:
                fout.write(reports[label].to_text())
    table = render_table(list(reports.values()), list(reports))
    logger.info("speaker probes:\n{}".format(table))
    with open(run.path('probe', 'table.txt'), 'w') as fout:
        fout.write(table + '\n')
    save_json(OrderedDict((label, r.to_dict()) for label, r in reports.items()), run.path('probe', 'reports.json'))
    return outputs


def _stage_pca(run):
    cfg = run.config
    semenc = run.semenc().cpu()
    provider = run.text_provider()
    omega = cfg.section('align').get('omega', 1.0)
    n_plots = cfg.section('align').get('dump-alignments', 4)
    rows = []
    for k, feats in enumerate(run.features('test')):
        a_s, tau_up, _ = align_to_text(semenc, feats.tokens, provider.embed(feats.text).embeddings, omega=omega)
        plot_path = run.path('pca', 'plots', '{}.png'.format(feats.utt_id)) if k < n_plots else None
        try:
            result = pca_compare(a_s, tau_up, plot_path=plot_path, title=feats.utt_id)
        except ValueError as err:
            logger.warning("pca skipped for '{}': {}".format(feats.utt_id, err))
            continue
        rows.append({'utt_id': feats.utt_id, 'alignment': result.alignment,
                     'explained_variance': float(np.sum(result.explained_variance))})
    if not rows:
        raise StageError('pca', "no test utterance could be analysed")
    df = pd.DataFrame(rows)
    df.to_csv(run.path('pca', 'pca.csv'), index=False)
    summary = {'pca_alignment': float(df['alignment'].mean()), 'n_utterances': len(df)}
    save_json(summary, run.path('pca', 'summary.json'))
    logger.info("pca alignment over {} test utterances: {:.3f}".format(len(df), summary['pca_alignment']))
    return ['pca.csv', 'summary.json']


def _stage_eval(run):
    cfg = run.config
    eval_sect = cfg.section('eval')
    pairs = _read_jsonl(run.path('convert', 'pairs.jsonl'))
    providers = get_embedding_providers(run.settings, cfg.feature_config)
    naturalness = DNSMOSCommand(eval_sect['dnsmos-command']) if eval_sect.get('dnsmos-command') else None
    df = evaluate_pairs(pairs, providers, cfg.feature_config, naturalness=naturalness)
    df.to_csv(run.path('eval', 'pairs.csv'), index=False)
    outputs = ['pairs.csv', 'report.txt', 'table.txt']
    identity = None
    identity_file = run.path('convert', 'identity.jsonl')
    if os.path.isfile(identity_file):
        identity = evaluate_pairs(_read_jsonl(identity_file), [], cfg.feature_config)
        identity.to_csv(run.path('eval', 'identity.csv'), index=False)
        outputs.append('identity.csv')
    speaker_report = None
    if pairs:
        speaker_report = conversion_speaker_report(
            pairs, run.features('train') + run.features('test'), cfg.feature_config,
            epochs=eval_sect.get('speaker-probe-epochs', 30), seed=cfg.seed_for('eval.speaker-probe'))
        with open(run.path('eval', 'speaker_probe.txt'), 'w') as fout:
            fout.write(speaker_report.to_text())
        outputs.append('speaker_probe.txt')
    pca_summary = run.path('pca', 'summary.json')
    pca_alignment = load_json(pca_summary)['pca_alignment'] if os.path.isfile(pca_summary) else None
    eval_report = summarize(df, pca_alignment=pca_alignment, identity=identity, speaker_report=speaker_report)
    with open(run.path('eval', 'report.txt'), 'w') as fout:
        fout.write(eval_report.to_text())
    save_json(eval_report.to_dict(), run.path('eval', 'summary.json'))
    table = render_eval_table(eval_report)
    with open(run.path('eval', 'table.txt'), 'w') as fout:
        fout.write(table + '\n')
    logger.info("evaluation:\n{}".format(table))
    return outputs + ['summary.json']


STAGE_FUNCS = {
    'corpus': _stage_corpus,
    'tokenize': _stage_tokenize,
    'semenc-train': _stage_semenc,
    'lm-train': _stage_lm,
    'acoustic-train': _stage_acoustic,
    'convert': _stage_convert,
    'probe': _stage_probe,
    'pca': _stage_pca,
    'eval': _stage_eval,
}


def _stage_manifest(config, stage):
    fname = os.path.join(config.stage_dir(stage), 'stage.json')
    return load_json(fname) if os.path.isfile(fname) else None


def _is_complete(config, stage):
    manifest = _stage_manifest(config, stage)
    if manifest is None or manifest.get('fingerprint') != config.stage_fingerprint(stage):
        return False
    return all(os.path.exists(os.path.join(config.stage_dir(stage), out)) for out in manifest.get('outputs', []))


def _run_locked(run, stage):
    config = run.config
    for up in UPSTREAM[stage]:
        if _stage_manifest(config, up) is None:
            raise StageError(stage, "missing upstream stage '{}'; run it first".format(up))
        if not run.force and not _is_complete(config, up):
            raise StageError(stage, "upstream stage '{}' is stale; rerun it or use --force".format(up))
    if not run.force and _is_complete(config, stage):
        logger.info("stage '{}' is up to date, skipping".format(stage))
        return _stage_manifest(config, stage)
    make_dir(config.stage_dir(stage))
    started = time.strftime('%Y-%m-%d %H:%M:%S')
    logger.info("running stage '{}' in {}".format(stage, config.stage_dir(stage)))
    try:
        with log_stage(stage):
            outputs = STAGE_FUNCS[stage](run)
    except StageError:
        raise
    except Exception as err:
        logger.exception("stage '{}' failed".format(stage))
        raise StageError(stage, "{}: {}".format(type(err).__name__, err))
    manifest = OrderedDict([
        ('stage', stage),
        ('fingerprint', config.stage_fingerprint(stage)),
        ('seed', config.seed),
        ('inputs', dict((up, config.stage_fingerprint(up)) for up in UPSTREAM[stage])),
        ('outputs', outputs),
        ('started', started),
        ('finished', time.strftime('%Y-%m-%d %H:%M:%S')),
    ])
    save_json(manifest, os.path.join(config.stage_dir(stage), 'stage.json'))
    return manifest


def run_stage(stage, config, force=False):
    """Run one stage under the run-directory lock.

    Parameters
    ----------
    stage : str
        One of :data:`STAGES`.
    config : PipelineConfig
    force : bool
        Rerun a completed stage and load checkpoints written with other settings.

    Returns
    -------
    dict
        The stage manifest.

    Raises
    ------
    ValueError
        Invalid configuration (before any work).
    StageError
        Missing upstream stage, another process holding the lock, or a failure
        inside the stage.
    """
    if stage not in STAGES:
        raise ValueError("unknown stage '{}' (expected one of {})".format(stage, ', '.join(STAGES)))
    config.validate()
    run = PipelineRun(config, force=force)
    change_log_file(logging.getLogger('semalignvc'), os.path.join(config.run_dir, 'semalignvc.log'))
    lock = FileLock(os.path.join(config.run_dir, '.lock'))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise StageError(stage, "another stage is running in {}".format(config.run_dir))
    try:
        return _run_locked(run, stage)
    finally:
        lock.release()


def run_pipeline(config, stages=None, force=False):
    """Run `stages` (default: the configured ones) in pipeline order."""
    config.validate()
    stages = config.stages if stages is None else list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError("unknown stages: {}".format(', '.join(unknown)))
    manifests = OrderedDict()
    for stage in sorted(stages, key=STAGES.index):
        manifests[stage] = run_stage(stage, config, force=force)
    return manifests
