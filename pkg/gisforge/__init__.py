"""Geometric image synthesis from G-buffers, built on `SimPy`__ and PyTorch.

__ https://simpy.readthedocs.io/en/latest/contents.html

The `gisforge` package trains networks that turn the geometric buffers of a
3D scene (surface normals, depth, material segmentation and an object mask,
over a background image) into photo-realistic images of the object in place.
It bundles everything needed to do this at desk scale: a procedural scene
oracle producing paired data, the networks and losses, a resumable trainer,
and an evaluation and experiment harness.

G-buffers and data
==================

:mod:`gisforge.gbuffer` defines the per-pixel sample, its invariants, the
on-disk sample format and the multi-resolution input pyramid.
:mod:`gisforge.forge` ray casts random scenes of spheres and boxes into
G-buffers and shades them into targets; it also generates whole datasets.

Networks and losses
===================

:mod:`gisforge.generator` holds the coarse-to-fine cascade synthesizing K
candidate images, :mod:`gisforge.discriminator` the patch discriminator and
its gradient regularizer, :mod:`gisforge.perception` the frozen feature
extractors of the perceptual loss, and :mod:`gisforge.objective` the
background, adversarial and min-over-K objectives.

Configuration
=============

A single, flat configuration dictionary with dot-separated keys (e.g.
``'gen.levels'``) describes a run. The :mod:`gisforge.config` module provides
the defaults, named presets, and the handling of user configuration files,
overrides and multi-run factors.

Runs
====

Training is a discrete event simulation whose clock counts optimisation steps.
A run is a tree of :class:`~gisforge.component.Component` instances executed
by :func:`~gisforge.runner.run()`, which takes the run through its phases:

 - *Initialization*: where the components' `__init__()` methods are called.
 - *Elaboration*: where inter-component connections are made and components'
   processes are started.
 - *Run*: where the step clock advances.
 - *Post-run*: where final checkpoints are written and results gathered.

:func:`~gisforge.runner.run_factors()` fans independent runs out to worker
processes; the ablation and diversity experiments of :mod:`gisforge.evaluate`
are built on it.

Monitoring
==========

:mod:`gisforge.tracer` writes the run log and the per-step metrics records;
:mod:`gisforge.progress` displays step progress.

"""

__all__ = ()
