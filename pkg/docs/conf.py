#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from setuptools_scm import get_version

# flake8: noqa

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.intersphinx',
    'sphinx.ext.todo',
    'sphinx.ext.coverage',
    'sphinx.ext.viewcode',
]

autodoc_member_order = 'bysource'
autodoc_mock_imports = ['torchvision']
templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'
project = 'gisforge'
copyright = '2021, gisforge developers'
author = 'gisforge developers'
version = get_version(root='..', relative_to=__file__)
language = None
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'
todo_include_todos = True

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']
htmlhelp_basename = 'gisforgedoc'

latex_elements = {}
latex_documents = [
    (master_doc, 'gisforge.tex', 'gisforge Documentation', author, 'manual'),
]
man_pages = [(master_doc, 'gisforge', 'gisforge Documentation', [author], 1)]
texinfo_documents = [
    (
        master_doc,
        'gisforge',
        'gisforge Documentation',
        author,
        'gisforge',
        'Geometric image synthesis from G-buffers',
        'Miscellaneous',
    ),
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3/', None),
    'simpy': ('https://simpy.readthedocs.io/en/latest/', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'torch': ('https://pytorch.org/docs/stable/', None),
}
