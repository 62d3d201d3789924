""" ``metaspk`` command line

Every subcommand reads its settings from the run configuration
(``--config`` file plus ``--set section.key=value`` overrides) and writes
its outputs atomically.  Exit status: 0 success, 1 usage or configuration
error, 2 I/O error, 3 numeric failure, 4 malformed or unsupported file.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
from toolz import curry

from . import archive
from ._version import __version__
from .config import RunConfig, dump_config, load_config, override
from .diarize import (der_score, diarize_session, group_sessions, read_rttm,
                      write_der_report, write_rttm)
from .episodes import (MODES, LabeledUtteranceStore, read_manifest,
                       smoothed_losses, train, way_shot_sweep, write_manifest)
from .exceptions import EXIT_CODES, MetaspkError, exit_code
from .features import compute_mfcc, read_wav, sliding_cmn
from .nets import (count_parameters, embed, load_weights, save_weights,
                   spec_to_text)
from .parallel import worker_map
from .synth import generate_corpus
from .verify import (evaluate_trials, load_backend, read_scores, read_trials,
                     save_backend, score_trials, train_backend, write_scores)

__all__ = ('run', 'main', 'build_parser')

logger = logging.getLogger(__name__)


@curry
def _extract(cfg, out_dir, row):
    utt, spk, wav_path = row
    f = sliding_cmn(compute_mfcc(read_wav(wav_path), cfg), cfg.cmn_window)
    path = os.path.join(out_dir, utt + '.feat')
    archive.write_features(path, f)
    return utt, spk, path


@curry
def _embed_row(weights, tap, row):
    return row[0], embed(weights, archive.read_features(row[2]), tap)


@curry
def _diarize_row(weights, cfg, backend, oracle, references, row):
    sid = row[0]
    if sid not in references:
        raise MetaspkError('no reference turns for session %r' % sid)
    ref = references[sid]
    k = len(set(s.speaker for s in ref)) if oracle else None
    return diarize_session(archive.read_features(row[2]), weights, ref, cfg,
                           oracle_k=k, backend=backend, session_id=sid)


def cmd_features(args, cfg, pmap):
    os.makedirs(args.out_dir, exist_ok=True)
    rows = list(pmap(_extract(cfg.features, args.out_dir),
                     read_manifest(args.manifest)))
    out = args.out_manifest or os.path.join(args.out_dir, 'features.list')
    write_manifest(out, rows)
    logger.info('wrote %d feature archives, manifest %s', len(rows), out)


def _training_spec(cfg, n_speakers):
    spec = cfg.model
    head = MODES[cfg.train.mode]
    if spec.head != head:
        spec = replace(spec, head=head, fc_dims=())
    if head == 'xvector':
        spec = replace(spec, n_speakers=n_speakers)
    return spec


def _store(path, cfg, pmap):
    return LabeledUtteranceStore.from_manifest(
        path, min_utterances=cfg.train.min_utterances, map=pmap)


def cmd_train(args, cfg, pmap):
    store = _store(args.manifest, cfg, pmap)
    spec = _training_spec(cfg, len(store.speakers))
    pretrained = load_weights(args.pretrained) if args.pretrained else None
    result = train(store, cfg.train, spec, pretrained=pretrained,
                   checkpoint_path=args.checkpoint, log_path=args.loss_log)
    save_weights(result.weights, args.weights)
    tail = smoothed_losses(result.losses, min(100, len(result.losses) or 1))
    if tail:
        logger.info('final smoothed loss %.4f', tail[-1])


def cmd_embed(args, cfg, pmap):
    weights = load_weights(args.weights)
    tap = args.tap or cfg.diarize.tap or None
    rows = read_manifest(args.manifest)
    archive.write_embeddings(args.out, pmap(_embed_row(weights, tap), rows))


def cmd_diarize(args, cfg, pmap):
    weights = load_weights(args.weights)
    dcfg = replace(cfg.diarize, tap=args.tap) if args.tap else cfg.diarize
    backend = load_backend(args.backend) if args.backend else None
    references = group_sessions(read_rttm(args.reference))
    oracle = args.oracle_k or dcfg.oracle_k
    hyps = pmap(_diarize_row(weights, dcfg, backend, oracle, references),
                read_manifest(args.manifest))
    write_rttm(args.out, [s for hyp in hyps for s in hyp])


def cmd_score_der(args, cfg, pmap):
    refs = group_sessions(read_rttm(args.reference))
    hyps = group_sessions(read_rttm(args.hypothesis))
    rows = [(sid, der_score(refs[sid], hyps.get(sid, []),
                            exclude_overlap=not args.score_overlap))
            for sid in sorted(refs)]
    write_der_report(args.out or sys.stdout, rows)


def cmd_train_backend(args, cfg, pmap):
    embeddings = archive.read_embeddings(args.embeddings)
    labels = dict((utt, spk) for utt, spk, _ in read_manifest(args.manifest))
    utts = [u for u in embeddings if u in labels]
    if not utts:
        raise MetaspkError('no embedding has a speaker label in %s'
                           % args.manifest)
    backend = train_backend(np.array([embeddings[u] for u in utts]),
                            [labels[u] for u in utts], cfg.verify.lda_dim,
                            cfg.verify.plda_iters)
    save_backend(args.out, backend)


def cmd_score_trials(args, cfg, pmap):
    if args.backend:
        backend = load_backend(args.backend)
    elif cfg.verify.backend == 'cosine':
        backend = 'cosine'
    else:
        raise MetaspkError('PLDA scoring needs --backend (or '
                           'verify.backend = cosine)')
    scored = score_trials(read_trials(args.trials),
                          archive.read_embeddings(args.embeddings), backend,
                          map=pmap)
    write_scores(args.out, scored)


def cmd_eval_eer(args, cfg, pmap):
    v = cfg.verify
    r = evaluate_trials(read_scores(args.scores), v.p_target, v.c_miss,
                        v.c_fa)
    print('EER\t%.3f%%\nminDCF\t%.4f\nminDCF_norm\t%.4f\np_target\t%g'
          % (100.0 * r.eer, r.min_dcf, r.min_dcf_norm, r.p_target))


def cmd_info(args, cfg, pmap):
    weights = load_weights(args.weights)
    print(spec_to_text(weights.spec))
    print('parameters\t%d' % count_parameters(weights.spec))


def cmd_gen_synth(args, cfg, pmap):
    paths = generate_corpus(args.out_dir, n_sessions=args.sessions,
                            seed=args.seed or 0)
    for name, path in sorted(paths.items()):
        print('%s\t%s' % (name, path))


def cmd_sweep(args, cfg, pmap):
    store = _store(args.manifest, cfg, pmap)
    held_out = _store(args.held_out, cfg, pmap)
    spec = _training_spec(cfg, len(store.speakers))
    results = way_shot_sweep(store, held_out, cfg.train, spec, args.ways,
                             args.shots, n_eval=args.episodes)
    print('way\tshot\taccuracy')
    for (way, shot), acc in sorted(results.items()):
        print('%d\t%d\t%.4f' % (way, shot, acc))


def _ints(text):
    return [int(x) for x in text.split(',') if x.strip()]


COMMANDS = {
    'features': (cmd_features, 'WAV manifest to MFCC feature archives',
                 [('manifest',), ('out_dir',),
                  ('--out-manifest', dict(default=None))]),
    'train': (cmd_train, 'train an encoder on a feature manifest',
              [('manifest',), ('weights',),
               ('--pretrained', dict(default=None)),
               ('--checkpoint', dict(default=None)),
               ('--loss-log', dict(default=None))]),
    'embed': (cmd_embed, 'embed every utterance of a feature manifest',
              [('weights',), ('manifest',), ('out',),
               ('--tap', dict(default=None))]),
    'diarize': (cmd_diarize, 'diarize sessions with oracle speech regions',
                [('weights',), ('manifest',), ('reference',), ('out',),
                 ('--oracle-k', dict(action='store_true')),
                 ('--backend', dict(default=None)),
                 ('--tap', dict(default=None))]),
    'score-der': (cmd_score_der, 'diarization error rate report',
                  [('reference',), ('hypothesis',),
                   ('--out', dict(default=None)),
                   ('--score-overlap', dict(action='store_true'))]),
    'train-backend': (cmd_train_backend, 'fit LDA and PLDA on embeddings',
                      [('embeddings',), ('manifest',), ('out',)]),
    'score-trials': (cmd_score_trials, 'score a verification trial list',
                     [('embeddings',), ('trials',), ('out',),
                      ('--backend', dict(default=None))]),
    'eval-eer': (cmd_eval_eer, 'EER and minDCF of a score file',
                 [('scores',)]),
    'info': (cmd_info, 'architecture and parameter count of weights',
             [('weights',)]),
    'gen-synth': (cmd_gen_synth, 'write the synthetic corpus',
                  [('out_dir',), ('--sessions', dict(type=int, default=4))]),
    'sweep': (cmd_sweep, 'held-out accuracy over a way/shot grid',
              [('manifest',), ('held_out',),
               ('--ways', dict(type=_ints, default=[2, 4])),
               ('--shots', dict(type=_ints, default=[1, 2])),
               ('--episodes', dict(type=int, default=100))]),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='run configuration file')
    common.add_argument('--set', action='append', default=[],
                        metavar='SECTION.KEY=VALUE',
                        help='override one configuration value')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--jobs', type=int, default=1,
                        help='worker processes, 0 for one per core')
    common.add_argument('-v', '--verbose', action='count', default=0)
    common.add_argument('--dump-config', action='store_true',
                        help='print the effective configuration and exit')

    codes = ', '.join('%d %s' % (v, k) for k, v in
                      sorted(EXIT_CODES.items(), key=lambda kv: kv[1]))
    parser = argparse.ArgumentParser(
        prog='metaspk', description=__doc__.splitlines()[0].strip(),
        epilog='exit codes: ' + codes, parents=[common])
    parser.add_argument('--version', action='version',
                        version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', metavar='command')
    for name, (func, helptext, arguments) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext,
                           epilog='exit codes: ' + codes)
        for spec in arguments:
            p.add_argument(spec[0], **(spec[1] if len(spec) > 1 else {}))
        p.set_defaults(func=func)
    return parser


def _configure_logging(verbosity):
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbosity, 2)]
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: '
                               '%(message)s')


def _run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = override(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed),
                      diarize=replace(cfg.diarize, seed=args.seed))
    return cfg


def run(argv=None):
    """ Run the command line with ``argv``; returns the exit status """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES['ok'] if not e.code else EXIT_CODES['usage']
    _configure_logging(args.verbose)
    try:
        cfg = _run_config(args)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_CODES['ok']
        if not getattr(args, 'func', None):
            parser.print_usage(sys.stderr)
            return EXIT_CODES['usage']
        with worker_map(args.jobs) as pmap:
            args.func(args, cfg, pmap)
    except Exception as e:
        print('metaspk %s: %s' % (args.command or '', e), file=sys.stderr)
        logger.debug('traceback', exc_info=True)
        return exit_code(e)
    return EXIT_CODES['ok']


def main():
    sys.exit(run())
