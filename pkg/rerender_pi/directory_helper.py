"""Organizes the directory structure of a re-rendering run. Creates
directories on the fly.

How the directory structure is organized:
    * Every subcommand writes below one output directory (``--out``).
    * Each training stage owns a subdirectory holding its checkpoint and
      its metrics log; fine-tuning adds one subdirectory per subject.
    * Evaluation artifacts go to ``reports``.
"""

import os

LEVELS = ('top', 'stage', 'subject', 'reports')


class DirectoryHelper:
    def __init__(self, top_dir, param_dict):
        """Small class for manipulating the standard directory structure of
        a run.

        Parameters
        ----------
        top_dir : str
            the output directory of the run.
        param_dict : dict
            must hold the ``stage``; fine-tuning also takes the ``subject``.

        Raises
        ------
        ValueError
            if the stage is missing.

        Examples
        --------
        >>> .
        >>> ├── coarse
        >>> │   ├── metrics.csv
        >>> │   └── model.ckpt
        >>> ├── detail
        >>> │   ├── metrics.csv
        >>> │   └── model.ckpt
        >>> ├── finetune
        >>> │   └── subj4
        >>> │       ├── metrics.csv
        >>> │       └── model.ckpt
        >>> ├── reports
        >>> ├── config.resolved.json
        >>> ├── rerender_pi.log
        >>> └── state.json
        """
        self._top_dir = top_dir
        self._required_parameters = ['stage']
        for required in self._required_parameters:
            if required not in param_dict:
                raise ValueError('Must define {}'.format(required))
        self._param_dict = dict(param_dict)

    def get_dir(self, level):
        """Get the directory for however far you want to go down the directory
        tree.

        Parameters
        ----------
        level : str
            one of 'top', 'stage', 'subject' or 'reports'.

        Returns
        -------
        str
            the path to the specified directory level.

        Raises
        ------
        ValueError
            for an unknown level, or 'subject' without a subject.
        """
        pdict = self._param_dict
        if level == 'top':
            return_dir = self._top_dir
        elif level == 'stage':
            return_dir = os.path.join(self._top_dir, pdict['stage'])
        elif level == 'subject':
            if 'subject' not in pdict:
                raise ValueError('Must define subject')
            return_dir = os.path.join(self._top_dir, pdict['stage'], pdict['subject'])
        elif level == 'reports':
            return_dir = os.path.join(self._top_dir, 'reports')
        else:
            raise ValueError('{} is not a valid directory level; choose one of {}'.format(level, LEVELS))
        return return_dir

    def working_dir(self):
        return self.get_dir('subject') if 'subject' in self._param_dict else self.get_dir('stage')

    def build_working_dir(self):
        """Creates the working directory of the current stage (and subject)
        if it does not exist yet.

        Returns
        -------
        str
        """
        os.makedirs(self.working_dir(), exist_ok=True)
        return self.working_dir()

    def checkpoint_path(self):
        return os.path.join(self.working_dir(), 'model.ckpt')

    def metrics_path(self):
        return os.path.join(self.working_dir(), 'metrics.csv')

    def state_path(self):
        return os.path.join(self._top_dir, 'state.json')

    def log_path(self):
        return os.path.join(self._top_dir, 'rerender_pi.log')
