#!/usr/bin/env python
"""
Run the whole re-rendering pipeline: generate a dataset if there is none,
then the coarse, detail and fine-tuning stages, one phase per call.
"""

import os
import sys

from rerender_pi.params import RunSettings
from rerender_pi.synth_data import generate_dataset
from rerender_pi.training import PipelineRun

out_dir = sys.argv[1] if len(sys.argv) > 1 else 'run'

settings = RunSettings()
if os.path.exists('config.json'):
    settings.load_config('config.json')
settings.validate()

data_dir = settings.get('data_dir')
if not os.path.exists(os.path.join(data_dir, 'manifest.json')):
    generate_dataset(data_dir, settings.get('n_subjects'), settings.get('frames_per_seq'),
                     n_views=settings.get('n_views'), n_refs=settings.get('ref_poses'), height=settings.get('height'),
                     width=settings.get('width'), degrade_cfg=settings.degrade_params,
                     seed=settings.get('data_seed'), n_heldout=settings.get('n_heldout'))

# The state is kept in <out_dir>/state.json, so re-running this script after an
# interruption continues with the phase that was cut short.
run = PipelineRun(settings, data_dir, out_dir)
while run.phase != 'done':
    run.run()
run.run()
